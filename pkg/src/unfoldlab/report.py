"""Report files: results.csv, instance_losses.csv, meta.json, loss_vs_iter.svg.

Everything is written with repr-formatted floats in a fixed row order, so
equal seeds give byte-identical CSV output.  The SVG is a hand-sized
log-scale line chart, one polyline per method, built through ElementTree
so it is always well-formed XML.
"""

import json
import os
import xml.etree.ElementTree as ET

import numpy as np

from . import __version__
from .bench import ExperimentReport, ListaReport
from .config import config_to_dict


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def _versions():
    return {"unfoldlab": __version__, "numpy": np.__version__}


def emit_report(report: ExperimentReport, out_dir) -> list:
    """Write the study's result files; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    depth = report.config.model.depth_k
    n_test = report.config.data.test

    rows = []
    per_instance_rows = []
    for method in report.methods:
        mean, std = method.mean, method.std
        for k in range(1, depth + 1):
            rows.append([method.name, k, float(mean[k - 1]), float(std[k - 1]), n_test])
        for i in range(method.losses.shape[0]):
            for k in range(1, depth + 1):
                per_instance_rows.append([method.name, k, i, float(method.losses[i, k - 1])])
    if report.baseline_converged is not None:
        conv = report.baseline_converged
        rows.append(["classical_converged", report.baseline_converged_iters,
                     float(conv.mean()), float(conv.std()), n_test])
        for i, v in enumerate(conv):
            per_instance_rows.append(["classical_converged",
                                      report.baseline_converged_iters, i, float(v)])

    paths = []
    results_csv = os.path.join(out_dir, "results.csv")
    _write_csv(results_csv, ["method", "iteration", "mean_loss", "std_loss", "n_test"], rows)
    paths.append(results_csv)

    inst_csv = os.path.join(out_dir, "instance_losses.csv")
    _write_csv(inst_csv, ["method", "iteration", "instance", "loss"], per_instance_rows)
    paths.append(inst_csv)

    meta = {
        "kind": report.kind,
        "config": config_to_dict(report.config),
        "seed": report.config.seed,
        "delta": report.delta,
        "tuned_eta": report.tuned_eta,
        "tuned_zeta": report.tuned_zeta,
        "baseline_converged_iterations": report.baseline_converged_iters,
        "param_counts": {m.name: m.param_count for m in report.methods},
        "train_seconds": {m.name: m.train_seconds for m in report.methods},
        "infer_seconds": {m.name: m.infer_seconds for m in report.methods},
        "versions": _versions(),
    }
    meta_json = os.path.join(out_dir, "meta.json")
    with open(meta_json, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(meta_json)

    svg = os.path.join(out_dir, "loss_vs_iter.svg")
    curves = [(m.name, list(range(1, depth + 1)), m.mean.tolist()) for m in report.methods]
    _write_svg(svg, curves, title=f"{report.kind} study: loss vs iteration")
    paths.append(svg)
    return paths


_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def _write_svg(path, curves, title, width=640, height=420) -> None:
    """curves: (name, xs, ys) triples; y is drawn on a log10 scale."""
    margin = 60
    all_y = [y for _, _, ys in curves for y in ys if y > 0]
    all_x = [x for _, xs, _ in curves for x in xs]
    y_lo = np.log10(min(all_y)) if all_y else -1.0
    y_hi = np.log10(max(all_y)) if all_y else 1.0
    if y_hi - y_lo < 1e-9:
        y_hi = y_lo + 1.0
    x_lo, x_hi = min(all_x), max(all_x)
    if x_hi == x_lo:
        x_hi = x_lo + 1

    def px(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(y):
        ly = np.log10(max(y, 1e-300))
        return height - margin - (ly - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                      width=str(width), height=str(height))
    ET.SubElement(root, "rect", x="0", y="0", width=str(width), height=str(height),
                  fill="white")
    # axes
    axis = ET.SubElement(root, "g", stroke="black", fill="none")
    ET.SubElement(axis, "line", x1=str(margin), y1=str(height - margin),
                  x2=str(width - margin), y2=str(height - margin))
    ET.SubElement(axis, "line", x1=str(margin), y1=str(margin),
                  x2=str(margin), y2=str(height - margin))
    for i, (name, xs, ys) in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        ET.SubElement(root, "polyline", points=pts, fill="none", stroke=color,
                      attrib={"stroke-width": "2", "data-method": name})
        label = ET.SubElement(root, "text", x=str(width - margin + 4),
                              y=str(int(py(ys[-1]))), fill=color)
        label.set("font-size", "11")
        label.text = name
    title_el = ET.SubElement(root, "text", x=str(margin), y="28")
    title_el.set("font-size", "14")
    title_el.text = title
    xlab = ET.SubElement(root, "text", x=str(width // 2), y=str(height - 16))
    xlab.set("font-size", "12")
    xlab.text = "iteration"
    ylab = ET.SubElement(root, "text", x="10", y=str(height // 2))
    ylab.set("font-size", "12")
    ylab.text = "loss (log)"
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def emit_lista_report(report: ListaReport, out_dir) -> list:
    os.makedirs(out_dir, exist_ok=True)
    depth = report.config.lista.depth_k
    rows = []
    for name in report.nmse:
        for k in range(1, depth + 1):
            coupling = report.coupling.get(name)
            rows.append([name, k, float(report.nmse[name][k - 1]),
                         float(report.l2_err[name][k - 1]),
                         float(coupling[k - 1]) if coupling else ""])
    paths = []
    csv_path = os.path.join(out_dir, "lista_results.csv")
    _write_csv(csv_path, ["method", "layer", "nmse", "l2_err", "coupling_residual"], rows)
    paths.append(csv_path)
    meta = {
        "kind": "lista",
        "config": config_to_dict(report.config),
        "mu": report.mu,
        "rho": report.rho,
        "rate_fit": {k: list(v) for k, v in report.rate.items()},
        "param_counts": report.param_counts,
        "train_seconds": report.train_seconds,
        "versions": _versions(),
    }
    meta_json = os.path.join(out_dir, "lista_meta.json")
    with open(meta_json, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    paths.append(meta_json)
    svg = os.path.join(out_dir, "nmse_vs_layer.svg")
    curves = [(name, list(range(1, depth + 1)), list(report.nmse[name]))
              for name in report.nmse]
    _write_svg(svg, curves, title="LISTA diagnostics: NMSE vs layer")
    paths.append(svg)
    return paths
