"""Versioned, checksummed JSON container for a completed fit.

Arrays are stored as ``float.hex`` strings so a save/load cycle reproduces
every number bit for bit, including infinities and NaNs. The checksum is
the SHA-256 of the canonical (sorted, compact) JSON encoding of the
payload.
"""

import hashlib
import json
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import __version__
from .additive import SubdistFit
from .errors import ArtifactError, DigestMismatchError
from .first_stage import FirstStageFit
from .inference import InfluenceRecords, VarianceComponents

FORMAT = "ivsubdist-fit"
FORMAT_VERSION = 1


def _encode(value):
    if isinstance(value, np.ndarray):
        if value.dtype.kind in "iub":
            return {"shape": list(value.shape), "dtype": "int", "data": value.ravel().tolist()}
        return {"shape": list(value.shape), "dtype": "float",
                "data": [float(v).hex() for v in value.ravel()]}
    if isinstance(value, (float, np.floating)):
        return {"float": float(value).hex()}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, tuple):
        return {"tuple": [_encode(v) for v in value]}
    return value


def _decode(value):
    if isinstance(value, dict):
        if "float" in value:
            return float.fromhex(value["float"])
        if "tuple" in value:
            return tuple(_decode(v) for v in value["tuple"])
        if "shape" in value:
            if value["dtype"] == "int":
                return np.array(value["data"], dtype=np.int64).reshape(value["shape"])
            data = [float.fromhex(v) for v in value["data"]]
            return np.array(data, dtype=float).reshape(value["shape"])
    return value


def _dump(obj):
    return {f.name: _encode(getattr(obj, f.name)) for f in fields(obj)}


def _load(cls, blob):
    return cls(**{k: _decode(v) for k, v in blob.items()})


@dataclass(frozen=True, eq=False)
class FitArtifact:
    fit: SubdistFit
    first: Optional[FirstStageFit]
    variance: VarianceComponents
    influence: Optional[InfluenceRecords]
    input_digest: str
    covariate_names: tuple
    level: float
    tool_version: str = __version__

    @property
    def offsets(self):
        return self.fit.offsets

    @classmethod
    def from_analysis(cls, analysis, input_digest):
        return cls(fit=analysis.fit, first=analysis.first, variance=analysis.variance,
                   influence=analysis.influence, input_digest=input_digest,
                   covariate_names=tuple(analysis.dataset.covariate_names),
                   level=float(analysis.options.ci_level))

    def payload(self):
        return {
            "fit": _dump(self.fit),
            "first": None if self.first is None else _dump(self.first),
            "variance": _dump(self.variance),
            "influence": None if self.influence is None else _dump(self.influence),
            "input_digest": self.input_digest,
            "covariate_names": list(self.covariate_names),
            "level": float(self.level).hex(),
            "tool_version": self.tool_version,
        }

    def check_input(self, digest):
        if digest != self.input_digest:
            raise DigestMismatchError(
                f"input digest {digest[:12]}... does not match the fitted data ({self.input_digest[:12]}...)")


def _canonical(payload):
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def save_artifact(artifact, path):
    payload = artifact.payload()
    doc = {"format": FORMAT, "version": FORMAT_VERSION,
           "sha256": hashlib.sha256(_canonical(payload)).hexdigest(), "payload": payload}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_artifact(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ArtifactError(f"cannot read artifact {path}: {exc}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"artifact {path} is corrupt or truncated: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ArtifactError(f"{path} is not a fit artifact")
    if doc.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"artifact format version {doc.get('version')} is not supported "
                            f"(expected {FORMAT_VERSION})")
    payload = doc.get("payload")
    if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("sha256"):
        raise ArtifactError(f"artifact {path} failed its checksum")
    try:
        return FitArtifact(
            fit=_load(SubdistFit, payload["fit"]),
            first=None if payload["first"] is None else _load(FirstStageFit, payload["first"]),
            variance=_load(VarianceComponents, payload["variance"]),
            influence=None if payload["influence"] is None else _load(InfluenceRecords, payload["influence"]),
            input_digest=payload["input_digest"],
            covariate_names=tuple(payload["covariate_names"]),
            level=float.fromhex(payload["level"]),
            tool_version=payload["tool_version"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"artifact {path} has an unexpected layout: {exc}") from None
