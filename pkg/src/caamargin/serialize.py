"""JSON checkpoint and dataset files.

Matrices are stored as ``{"shape": [rows, cols], "data": [...]}`` with the
data in row-major order.  Floats are written with ``repr`` precision so a
load/save round trip is bit-exact.  Every file carries ``format`` and
``version`` keys; readers reject unknown formats and newer versions.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .config import TrainConfig, format_value, parse_value
from .encoder import EncoderParams
from .errors import DataError
from .losses import ClassifierWeights, ClassVectorTable
from .synth import Dataset, SpeakerModel, TrialList
from .trainer import TrainState, make_optimizer

CHECKPOINT_FORMAT = "caamargin.checkpoint"
DATASET_FORMAT = "caamargin.dataset"
FORMAT_VERSION = 1


def pack_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def unpack_matrix(obj):
    try:
        return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"malformed matrix entry: {exc}") from None


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def fingerprint(text):
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def _check_header(obj, fmt, path):
    if not isinstance(obj, dict) or obj.get("format") != fmt:
        raise DataError(f"{path}: not a {fmt} file")
    if obj.get("version", 0) > FORMAT_VERSION:
        raise DataError(f"{path}: version {obj['version']} is newer than supported {FORMAT_VERSION}")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_text(state: TrainState, cfg: TrainConfig):
    enc = state.encoder
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "dims": enc.dims,
        "activation": enc.activation,
        "layers": [{"weight": pack_matrix(w), "bias": pack_matrix(b)} for w, b in enc.layers],
        "classifier_weights": pack_matrix(state.classifier.weights),
        "class_vectors": pack_matrix(state.class_table.vectors),
        "speaker_ids": list(state.class_table.speaker_ids),
        "step": state.step,
        "config": {k: format_value(v) for k, v in vars(cfg).items()},
    }
    return dumps(obj)


def save_checkpoint(path, state, cfg):
    text = checkpoint_text(state, cfg)
    _write(path, text)
    return fingerprint(text)


def load_checkpoint(path):
    """Returns ``(state, config, fingerprint)``; optimizer state is not stored."""
    obj, text = _read_json(path)
    _check_header(obj, CHECKPOINT_FORMAT, path)
    try:
        cfg = TrainConfig(**{k: parse_value(TrainConfig, k, v) for k, v in obj["config"].items()})
        layers = [(unpack_matrix(l["weight"]), unpack_matrix(l["bias"])) for l in obj["layers"]]
        enc = EncoderParams(layers, obj["activation"])
        state = TrainState(
            enc,
            ClassifierWeights(unpack_matrix(obj["classifier_weights"])),
            ClassVectorTable(unpack_matrix(obj["class_vectors"]), obj["speaker_ids"]),
            make_optimizer(cfg),
            int(obj["step"]),
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: missing checkpoint field {exc}") from None
    if enc.dims != obj["dims"]:
        raise DataError(f"{path}: recorded dims {obj['dims']} disagree with layers {enc.dims}")
    return state, cfg, fingerprint(text)


# ---------------------------------------------------------------------------
# datasets


def dataset_text(ds: Dataset, is_eval=None):
    split = None if is_eval is None else ["eval" if e else "train" for e in is_eval]
    obj = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "header": ds.header(),
        "features": pack_matrix(ds.features),
        "labels": [int(x) for x in ds.labels],
        "utt_ids": list(ds.utt_ids),
        "outlier": [bool(x) for x in ds.outlier],
        "centroids": pack_matrix(ds.centroids),
        "split": split,
    }
    return dumps(obj)


def save_dataset(path, ds, is_eval=None):
    text = dataset_text(ds, is_eval)
    _write(path, text)
    return fingerprint(text)


def load_dataset(path):
    """Returns ``(dataset, is_eval mask or None, fingerprint)``."""
    obj, text = _read_json(path)
    _check_header(obj, DATASET_FORMAT, path)
    try:
        h = obj["header"]
        model = SpeakerModel(h["d_in"], h["spread"], h["outlier_rate"], h["outlier_shift"],
                             h["radius"])
        ds = Dataset(unpack_matrix(obj["features"]), np.array(obj["labels"], dtype=np.int64),
                     list(obj["utt_ids"]), int(h["seed"]), model,
                     unpack_matrix(obj["centroids"]), np.array(obj["outlier"], dtype=bool))
        split = obj.get("split")
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: missing dataset field {exc}") from None
    n = len(ds.labels)
    if ds.features.shape != (n, model.d_in) or len(ds.utt_ids) != n:
        raise DataError(f"{path}: header, features and labels disagree in size")
    is_eval = None if split is None else np.array([s == "eval" for s in split])
    return ds, is_eval, fingerprint(text)


def save_trials(path, trials):
    text = "\n".join(trials.to_lines()) + "\n"
    _write(path, text)
    return fingerprint(text)


def load_trials(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return TrialList.from_lines(text.splitlines()), fingerprint(text)
