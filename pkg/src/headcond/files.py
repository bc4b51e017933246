"""Text documents for landmark and audio-feature sequences.

Both are small JSON documents with a canonical field order.  Floats are written
with 17 significant digits so a save/load round trip is lossless.
"""

import json
from pathlib import Path

import numpy as np


def fmt_float(x) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ValueError("cannot serialize a non-finite value")
    text = "%.17g" % x
    # "-0" would parse back as the integer 0 and lose the sign
    return text + ".0" if text == "-0" else text


def _nested(a) -> str:
    a = np.asarray(a)
    if a.ndim == 1:
        return "[" + ", ".join(fmt_float(x) for x in a) + "]"
    return "[" + ", ".join(_nested(x) for x in a) + "]"


def _load_doc(text, required, what):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed {what} file: {e}") from None
    if not isinstance(doc, dict) or not set(required) <= doc.keys():
        raise ValueError(f"malformed {what} file: need fields {', '.join(required)}")
    return doc


def dumps_landmarks(frames, fps=25.0) -> str:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[2] != 2:
        raise ValueError("landmark frames must be (n, K, 2)")
    rows = ",\n    ".join(_nested(f) for f in frames)
    return f'{{\n  "fps": {fmt_float(fps)},\n  "K": {frames.shape[1]},\n  "frames": [\n    {rows}\n  ]\n}}\n'


def loads_landmarks(text):
    """Returns (frames (n, K, 2), fps)."""
    doc = _load_doc(text, ("fps", "K", "frames"), "landmark")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (doc["K"], 2):
        raise ValueError(f"landmark frames do not match K={doc['K']}")
    return frames, float(doc["fps"])


def save_landmarks(path, frames, fps=25.0):
    Path(path).write_text(dumps_landmarks(frames, fps))


def load_landmarks(path):
    return loads_landmarks(Path(path).read_text())


def dumps_audio(frames, fps=25.0) -> str:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("audio features must be (n, D_a)")
    rows = ",\n    ".join(_nested(f) for f in frames)
    return f'{{\n  "fps": {fmt_float(fps)},\n  "D_a": {frames.shape[1]},\n  "frames": [\n    {rows}\n  ]\n}}\n'


def loads_audio(text):
    doc = _load_doc(text, ("fps", "D_a", "frames"), "audio-feature")
    frames = np.asarray(doc["frames"], dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != doc["D_a"]:
        raise ValueError(f"audio frames do not match D_a={doc['D_a']}")
    return frames, float(doc["fps"])
