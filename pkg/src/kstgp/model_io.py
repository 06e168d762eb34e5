"""Versioned JSON model files.

Floats are written with ``repr`` precision by the json module, so a load
reproduces every control point and hyperparameter bit for bit. Keys are
sorted and nothing time-dependent is stored, so identical runs give
byte-identical files.
"""

from __future__ import annotations

import json

from kstgp.errors import ModelFormatError
from kstgp.gp import GPActivation, Hyperparameters
from kstgp.network import Network, Unit

FORMAT = "kstgp-model"
VERSION = 1


def _af_to_dict(af: GPActivation) -> dict:
    return {"xs": af.xs.tolist(), "ys": af.ys.tolist(), "hyper": af.hyper.to_dict()}


def _af_from_dict(d: dict) -> GPActivation:
    return GPActivation(d["xs"], d["ys"], Hyperparameters(**d["hyper"]))


def network_to_dict(net: Network) -> dict:
    return {
        "dims": net.dims,
        "repetition": net.repetition,
        "units": [
            {"inner": [_af_to_dict(af) for af in u.inner], "outer": _af_to_dict(u.outer)}
            for u in net.units
        ],
    }


def network_from_dict(d: dict) -> Network:
    units = [Unit([_af_from_dict(a) for a in u["inner"]], _af_from_dict(u["outer"])) for u in d["units"]]
    return Network(int(d["dims"]), int(d["repetition"]), units)


def dumps(net: Network, **meta) -> str:
    doc = {"format": FORMAT, "version": VERSION, "network": network_to_dict(net), **meta}
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def loads(text: str) -> tuple[Network, dict]:
    """Parse a model document; returns the network and the remaining metadata."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFormatError("not a kstgp model file")
    if doc.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        net = network_from_dict(doc.pop("network"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed network section: {exc}") from None
    except Exception as exc:  # InvalidConfig from the constructors
        raise ModelFormatError(f"invalid network: {exc}") from None
    return net, doc


def save(path, net: Network, **meta):
    with open(path, "w") as fh:
        fh.write(dumps(net, **meta))


def load(path) -> tuple[Network, dict]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file: {exc}") from None
    return loads(text)
