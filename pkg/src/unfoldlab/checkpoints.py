"""Model checkpoints: one container format for RPCA and LISTA models.

Header carries the model kind, architecture fields, and an optional
training-stage tag; parameter tensors are stored as named float blocks in
declared order.  Round-trips are bit-exact.
"""

import numpy as np

from .container import read_container, write_container
from .errors import FormatError
from .lista import ListaModel
from .unfolded import UnfoldedRpcaModel

CHECKPOINT_MAGIC = b"UNFCK1"


def save_checkpoint(model, path, training_stage: str = "init", seed: int = 0) -> None:
    blocks = [("param." + name, arr) for name, arr in model.params.items()]
    if isinstance(model, UnfoldedRpcaModel):
        header = {
            "kind": "rpca_unfolded",
            "variant": model.variant,
            "depth_k": model.depth_k,
            "rank_r": model.rank_r,
            "dims": [model.n1, model.n2],
            "hidden_channels": model.hidden_channels,
            "shared_conv": model.shared_conv,
            "init_zeta0": model.init_zeta0,
            "training_stage": training_stage,
            "seed": seed,
        }
        blocks.insert(0, ("psi_hat", model.psi_hat))
    elif isinstance(model, ListaModel):
        header = {
            "kind": "lista",
            "coupled": model.coupled,
            "tied": model.tied,
            "depth_k": model.k_layers,
            "dims": [model.m, model.n],
            "training_stage": training_stage,
            "seed": seed,
        }
        if model.h_ref is not None:
            blocks.insert(0, ("h_ref", model.h_ref))
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    write_container(path, CHECKPOINT_MAGIC, header, blocks)


def load_checkpoint(path):
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    kind = header.get("kind")
    if kind == "rpca_unfolded":
        if "psi_hat" not in arrays:
            raise FormatError("checkpoint missing psi_hat block", offset=14)
        n1, n2 = header["dims"]
        model = UnfoldedRpcaModel(
            variant=header["variant"], depth_k=int(header["depth_k"]),
            rank_r=int(header["rank_r"]), n1=int(n1), n2=int(n2),
            psi_hat=arrays["psi_hat"],
            hidden_channels=int(header["hidden_channels"]),
            shared_conv=bool(header["shared_conv"]),
            init_zeta0=float(header["init_zeta0"]),
            params=params,
        )
    elif kind == "lista":
        m, n = header["dims"]
        model = ListaModel(
            k_layers=int(header["depth_k"]), m=int(m), n=int(n),
            coupled=bool(header["coupled"]), tied=bool(header["tied"]),
            h_ref=arrays.get("h_ref"), params=params,
        )
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}", offset=14)
    return model, header
