"""Per-tile segmentation backends.

Two kinds behind one contract:

- "builtin": a deterministic per-pixel classifier on (luma, R-B, G-B)
  conjunctive thresholds. No spatial coupling, so stitched output is exactly
  testable and desk-scale pipelines need no model at all.
- "external": a child process speaking a framed stdio protocol, one process
  per worker. Real networks plug in behind this without the workbench doing
  any learning itself.

Framed stdio protocol (bit-exact): each message is a 4-byte little-endian
payload length, then the payload: one UTF-8 JSON header line ending in b"\\n"
followed by the raw body bytes.

    infer request   header {"op":"infer","w":W,"h":H,"c":3}
                    body   W*H*3 row-major RGB bytes
    infer response  header {"w":W,"h":H,"classes":C}
                    body   W*H label bytes, then optionally W*H little-endian
                           float32 confidence values
    train request   header {"op":"train","manifest":PATH,"hp":{...}}
    train response  header {"model":PATH}
"""

from __future__ import annotations

import json
import os
import selectors
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BackendError, ProtocolError, ValidationError
from .tissue import luma

DEFAULT_TILE_TIMEOUT = 120.0
MAX_RETRIES = 2

# Training defaults known to work well for 512-patch segmentation networks.
DEFAULT_TRAIN_STEPS = 400_000
DEFAULT_PATCH_SIZE = 512
DEFAULT_BATCH_SIZE = 12
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_OUTPUT_STRIDE = 16


@dataclass
class LabelMask:
    """Class-index raster; class 0 is background."""

    labels: np.ndarray  # (h, w) uint8
    classes: int
    confidence: np.ndarray | None = None  # (h, w) float32 in [0, 1]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValidationError("labels must be a 2-d raster")
        if self.classes < 2:
            raise ValidationError("classes must be >= 2")
        if self.labels.size and int(self.labels.max()) >= self.classes:
            raise ValidationError("label value out of range for class count")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=np.float32)
            if self.confidence.shape != self.labels.shape:
                raise ValidationError("confidence dims must match labels")

    @property
    def h(self) -> int:
        return self.labels.shape[0]

    @property
    def w(self) -> int:
        return self.labels.shape[1]


@dataclass
class ClassRule:
    """Conjunctive thresholds; all present constraints must hold (strictly).

    luma_max means luma < luma_max, rb_min means (R - B) > rb_min, and so on.
    """

    luma_max: float | None = None
    luma_min: float | None = None
    rb_min: float | None = None
    rb_max: float | None = None
    gb_min: float | None = None
    gb_max: float | None = None

    def validate(self):
        for lo, hi, name in ((self.luma_min, self.luma_max, "luma"),
                             (self.rb_min, self.rb_max, "rb"),
                             (self.gb_min, self.gb_max, "gb")):
            if lo is not None and hi is not None and lo >= hi:
                raise ValidationError(f"{name} thresholds not well-ordered: {lo} >= {hi}")

    def matches(self, y: np.ndarray, rb: np.ndarray, gb: np.ndarray) -> np.ndarray:
        m = np.ones(y.shape, dtype=bool)
        if self.luma_max is not None:
            m &= y < self.luma_max
        if self.luma_min is not None:
            m &= y > self.luma_min
        if self.rb_min is not None:
            m &= rb > self.rb_min
        if self.rb_max is not None:
            m &= rb < self.rb_max
        if self.gb_min is not None:
            m &= gb > self.gb_min
        if self.gb_max is not None:
            m &= gb < self.gb_max
        return m

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class TrainingHyperparams:
    steps: int = DEFAULT_TRAIN_STEPS
    patch_size: int = DEFAULT_PATCH_SIZE
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    output_stride: int = DEFAULT_OUTPUT_STRIDE
    init_model: str | None = None

    def validate(self):
        for name in ("steps", "patch_size", "batch_size", "learning_rate", "output_stride"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.patch_size % 16 != 0:
            raise ValidationError("patch_size must be a multiple of 16")

    def to_dict(self) -> dict:
        d = {"steps": self.steps, "patch_size": self.patch_size,
             "batch_size": self.batch_size, "learning_rate": self.learning_rate,
             "output_stride": self.output_stride}
        if self.init_model is not None:
            d["init_model"] = self.init_model
        return d


@dataclass
class BackendConfig:
    kind: str = "builtin"  # builtin | external
    class_names: list[str] = field(default_factory=lambda: ["background", "tissue"])
    rules: list[ClassRule] = field(default_factory=lambda: [ClassRule(luma_max=200, rb_min=30)])
    command: list[str] | None = None
    workdir: str | None = None
    tile_timeout: float = DEFAULT_TILE_TIMEOUT

    def validate(self):
        if self.kind not in ("builtin", "external"):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if not self.class_names or self.class_names[0] != "background":
            raise ValidationError('class_names[0] must be "background"')
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError("class_names must be unique")
        if self.kind == "builtin":
            if len(self.rules) != len(self.class_names) - 1:
                raise ValidationError("builtin backend needs one rule per non-background class")
            for rule in self.rules:
                rule.validate()
        else:
            if not self.command:
                raise ValidationError("external backend needs a command line")

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "class_names": list(self.class_names)}
        if self.kind == "builtin":
            d["rules"] = [r.to_dict() for r in self.rules]
        else:
            d["command"] = list(self.command or [])
            if self.workdir:
                d["workdir"] = self.workdir
            d["tile_timeout"] = self.tile_timeout
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackendConfig":
        kind = d.get("kind", "builtin")
        class_names = list(d.get("class_names", ["background", "tissue"]))
        try:
            rules = [ClassRule(**r) for r in d.get("rules", [])]
        except TypeError as exc:
            raise ValidationError(f"bad builtin rule: {exc}") from exc
        if kind == "builtin" and not rules:
            rules = [ClassRule(luma_max=200, rb_min=30) for _ in class_names[1:]]
        cfg = cls(kind=kind, class_names=class_names, rules=rules,
                  command=d.get("command"), workdir=d.get("workdir"),
                  tile_timeout=float(d.get("tile_timeout", DEFAULT_TILE_TIMEOUT)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "BackendConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read backend config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Framed stdio protocol


def encode_frame(header: dict, body: bytes = b"") -> bytes:
    payload = json.dumps(header, separators=(",", ":")).encode() + b"\n" + body
    return struct.pack("<I", len(payload)) + payload


def decode_frame(payload: bytes) -> tuple[dict, bytes]:
    nl = payload.find(b"\n")
    if nl < 0:
        raise ProtocolError("frame payload has no header line")
    try:
        header = json.loads(payload[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad frame header: {exc}") from exc
    return header, payload[nl + 1:]


def encode_label_mask(mask: LabelMask) -> bytes:
    header = {"w": mask.w, "h": mask.h, "classes": mask.classes}
    body = mask.labels.tobytes()
    if mask.confidence is not None:
        body += mask.confidence.astype("<f4").tobytes()
    return encode_frame(header, body)


def decode_label_mask(payload: bytes) -> LabelMask:
    header, body = decode_frame(payload)
    try:
        w, h, classes = int(header["w"]), int(header["h"]), int(header["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"label mask header missing fields: {header}") from exc
    n = w * h
    if len(body) == n:
        conf = None
    elif len(body) == n + 4 * n:
        conf = np.frombuffer(body[n:], dtype="<f4").reshape(h, w)
    else:
        raise ProtocolError(f"label mask body has {len(body)} bytes, expected {n} or {5 * n}")
    labels = np.frombuffer(body[:n], dtype=np.uint8).reshape(h, w)
    if labels.size and int(labels.max()) >= classes:
        raise ProtocolError("label value out of range in external response")
    return LabelMask(labels=labels.copy(), classes=classes,
                     confidence=None if conf is None else conf.copy())


def _read_exact(fd: int, n: int, deadline: float) -> bytes:
    sel = selectors.DefaultSelector()
    sel.register(fd, selectors.EVENT_READ)
    chunks = []
    got = 0
    try:
        while got < n:
            budget = deadline - time.monotonic()
            if budget <= 0:
                raise TimeoutError(f"timed out reading {n} bytes (got {got})")
            if not sel.select(timeout=budget):
                continue
            chunk = os.read(fd, n - got)
            if not chunk:
                raise EOFError(f"backend stream closed after {got}/{n} bytes")
            chunks.append(chunk)
            got += len(chunk)
    finally:
        sel.close()
    return b"".join(chunks)


def read_frame(fd: int, timeout: float) -> bytes:
    """Read one framed payload from a pipe, honoring a wall-clock timeout."""
    deadline = time.monotonic() + timeout
    (length,) = struct.unpack("<I", _read_exact(fd, 4, deadline))
    return _read_exact(fd, length, deadline)


class ExternalProcess:
    """One child backend process and its stream framing. Not thread-safe;
    each worker owns its own instance."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.cfg.command, cwd=self.cfg.workdir,
                stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def request(self, frame: bytes, timeout: float) -> bytes:
        proc = self._ensure()
        try:
            proc.stdin.write(frame)
            proc.stdin.flush()
            return read_frame(proc.stdout.fileno(), timeout)
        except (BrokenPipeError, EOFError, TimeoutError, OSError) as exc:
            self.close()
            raise BackendError(f"external backend failed: {exc}") from exc

    def close(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except Exception:
                pass
            self._proc = None


class Backend:
    """Uniform inference/training surface over a BackendConfig."""

    def __init__(self, cfg: BackendConfig):
        cfg.validate()
        self.cfg = cfg
        self._local = threading.local()
        self._procs: list[ExternalProcess] = []
        self._procs_lock = threading.Lock()

    # -- inference -----------------------------------------------------

    def infer_tile(self, tile: np.ndarray) -> LabelMask:
        """Segment one RGB tile into a LabelMask of identical dims."""
        tile = np.asarray(tile)
        if tile.ndim != 3 or tile.shape[2] != 3:
            raise ValidationError("tile must be (h, w, 3) RGB")
        if self.cfg.kind == "builtin":
            return self._infer_builtin(tile)
        return self._infer_external(tile)

    def _infer_builtin(self, tile: np.ndarray) -> LabelMask:
        y = luma(tile).astype(np.int16)
        r = tile[:, :, 0].astype(np.int16)
        g = tile[:, :, 1].astype(np.int16)
        b = tile[:, :, 2].astype(np.int16)
        rb = r - b
        gb = g - b
        labels = np.zeros(tile.shape[:2], dtype=np.uint8)
        unassigned = np.ones(tile.shape[:2], dtype=bool)
        for class_id, rule in enumerate(self.cfg.rules, start=1):
            hit = unassigned & rule.matches(y, rb, gb)
            labels[hit] = class_id
            unassigned &= ~hit
        return LabelMask(labels=labels, classes=self.cfg.classes)

    def _external_process(self) -> ExternalProcess:
        proc = getattr(self._local, "proc", None)
        if proc is None:
            proc = ExternalProcess(self.cfg)
            self._local.proc = proc
            with self._procs_lock:
                self._procs.append(proc)
        return proc

    def _infer_external(self, tile: np.ndarray) -> LabelMask:
        h, w = tile.shape[:2]
        request = encode_frame({"op": "infer", "w": w, "h": h, "c": 3},
                               np.ascontiguousarray(tile, dtype=np.uint8).tobytes())
        proc = self._external_process()
        last: Exception | None = None
        for _ in range(1 + MAX_RETRIES):
            try:
                payload = proc.request(request, self.cfg.tile_timeout)
                mask = decode_label_mask(payload)
                if (mask.h, mask.w) != (h, w):
                    raise ProtocolError(
                        f"external mask is {mask.w}x{mask.h}, tile is {w}x{h}")
                return mask
            except ProtocolError:
                raise
            except BackendError as exc:
                last = exc
        raise BackendError(f"external backend failed after {1 + MAX_RETRIES} attempts: {last}")

    # -- training ------------------------------------------------------

    def train(self, manifest_path: str | Path, hp: TrainingHyperparams,
              timeout: float = 24 * 3600.0) -> str:
        """Hand a training manifest to the external process; the workbench
        itself performs no learning. Returns the model locator it reports."""
        if self.cfg.kind != "external":
            raise BackendError("builtin backend is not trainable")
        hp.validate()
        request = encode_frame({"op": "train", "manifest": str(manifest_path),
                                "hp": hp.to_dict()})
        proc = self._external_process()
        payload = proc.request(request, timeout)
        header, _ = decode_frame(payload)
        model = header.get("model")
        if not model:
            raise BackendError(f"trainer reported no model path: {header}")
        if not Path(model).exists():
            raise BackendError(f"trainer output model missing: {model}")
        return str(model)

    def close(self):
        """Kill every worker's child process (no-op for builtin)."""
        with self._procs_lock:
            procs, self._procs = self._procs, []
        for proc in procs:
            proc.close()
