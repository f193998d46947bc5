"""Segmentation backends: builtin rules, the framed stdio protocol, external
process lifecycle (retries, timeouts), and training plumbing."""

from __future__ import annotations

import json
import sys
import time

import numpy as np
import pytest

from slideseg.backends import (Backend, BackendConfig, ClassRule, LabelMask,
                               TrainingHyperparams, decode_frame,
                               decode_label_mask, encode_frame,
                               encode_label_mask)
from slideseg.errors import (BackendError, ProtocolError, ValidationError)
from slideseg.tissue import luma

# One stub backend script, mode selected by argv[1]. It speaks the framed
# protocol: 4-byte LE length, JSON header line, raw body bytes.
STUB_BACKEND = r'''
import json, os, struct, sys, time

mode = sys.argv[1]
state = sys.argv[2] if len(sys.argv) > 2 else ""

def read_exact(n):
    data = b""
    while len(data) < n:
        chunk = sys.stdin.buffer.read(n - len(data))
        if not chunk:
            sys.exit(0)
        data += chunk
    return data

def send(header, body=b""):
    payload = json.dumps(header).encode() + b"\n" + body
    sys.stdout.buffer.write(struct.pack("<I", len(payload)) + payload)
    sys.stdout.buffer.flush()

if mode == "crash":
    sys.exit(3)
if mode == "flaky" and not os.path.exists(state):
    open(state, "w").write("seen")
    sys.exit(3)

while True:
    (length,) = struct.unpack("<I", read_exact(4))
    payload = read_exact(length)
    nl = payload.index(b"\n")
    header = json.loads(payload[:nl])
    body = payload[nl + 1:]
    if header.get("op") == "train":
        open(state, "w").write(json.dumps(header))
        model = state + ".model"
        open(model, "w").write("weights")
        send({"model": model})
        continue
    w, h = header["w"], header["h"]
    if mode == "sleep":
        time.sleep(60)
    if mode == "slow":
        time.sleep(1.5)
    if mode == "wrongdims":
        send({"w": w + 1, "h": h, "classes": 2}, bytes((w + 1) * h))
        continue
    if mode == "badlabel":
        send({"w": w, "h": h, "classes": 2}, b"\xff" * (w * h))
        continue
    labels = bytearray(w * h)
    conf = b""
    if mode == "confident":
        pixels = body  # row-major RGB
        for i in range(w * h):
            labels[i] = 1 if pixels[3 * i] < 100 else 0
        import array
        conf = array.array("f", [0.75] * (w * h)).tobytes()
    send({"w": w, "h": h, "classes": 2}, bytes(labels) + conf)
'''


@pytest.fixture(scope="module")
def stub_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("backend") / "stub_backend.py"
    path.write_text(STUB_BACKEND)
    return path


def external_cfg(stub_path, mode: str, state: str = "", timeout: float = 20.0):
    return BackendConfig(kind="external",
                         class_names=["background", "tissue"], rules=[],
                         command=[sys.executable, str(stub_path), mode, state],
                         tile_timeout=timeout)


# -- builtin ----------------------------------------------------------------


def test_builtin_white_tile_all_background():
    mask = Backend(BackendConfig()).infer_tile(
        np.full((64, 64, 3), 255, dtype=np.uint8))
    assert mask.classes == 2
    assert (mask.labels == 0).all()
    assert mask.confidence is None


def test_builtin_red_disk_matches_pixel_oracle():
    tile = np.full((128, 128, 3), 255, dtype=np.uint8)
    ys, xs = np.mgrid[0:128, 0:128]
    disk = (ys - 64) ** 2 + (xs - 64) ** 2 <= 40 ** 2
    tile[disk] = (200, 40, 40)
    mask = Backend(BackendConfig()).infer_tile(tile)
    y = luma(tile).astype(int)
    rb = tile[:, :, 0].astype(int) - tile[:, :, 2].astype(int)
    oracle = (y < 200) & (rb > 30)  # the builtin rule, applied per pixel
    assert (mask.labels.astype(bool) == oracle).all()
    assert (mask.labels.astype(bool) == disk).all()


def test_builtin_no_spatial_coupling():
    rng = np.random.default_rng(6)
    backend = Backend(BackendConfig())
    a = rng.integers(0, 256, size=(32, 48, 3), dtype=np.uint8)
    b = rng.integers(0, 256, size=(32, 16, 3), dtype=np.uint8)
    joined = backend.infer_tile(np.concatenate([a, b], axis=1))
    assert (joined.labels[:, :48] == backend.infer_tile(a).labels).all()
    assert (joined.labels[:, 48:] == backend.infer_tile(b).labels).all()


def test_builtin_multiclass_first_match_wins():
    cfg = BackendConfig(class_names=["background", "red", "dark"],
                        rules=[ClassRule(rb_min=30), ClassRule(luma_max=100)])
    tile = np.array([[[200, 30, 30], [10, 10, 10], [255, 255, 255]]],
                    dtype=np.uint8)
    labels = Backend(cfg).infer_tile(tile).labels
    assert labels.tolist() == [[1, 2, 0]]


def test_class_rule_validation():
    with pytest.raises(ValidationError):
        BackendConfig(rules=[ClassRule(luma_min=100, luma_max=50)]).validate()
    with pytest.raises(ValidationError):
        BackendConfig(class_names=["tissue"]).validate()
    with pytest.raises(ValidationError):
        BackendConfig(class_names=["background", "a", "a"],
                      rules=[ClassRule(), ClassRule()]).validate()
    with pytest.raises(ValidationError):
        BackendConfig(kind="external", command=None).validate()
    with pytest.raises(ValidationError):
        Backend(BackendConfig()).infer_tile(np.zeros((4, 4), dtype=np.uint8))


def test_backend_config_dict_roundtrip(tmp_path):
    cfg = BackendConfig(class_names=["background", "a", "b"],
                        rules=[ClassRule(luma_max=180, rb_min=20),
                               ClassRule(luma_max=90)])
    again = BackendConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert BackendConfig.load(path).to_dict() == cfg.to_dict()
    with pytest.raises(ValidationError):
        BackendConfig.load(tmp_path / "missing.json")


# -- protocol ---------------------------------------------------------------


def test_frame_roundtrip():
    header, body = {"op": "infer", "w": 3, "h": 2, "c": 3}, b"\x01\x02"
    frame = encode_frame(header, body)
    assert int.from_bytes(frame[:4], "little") == len(frame) - 4
    assert decode_frame(frame[4:]) == (header, body)


def test_label_mask_roundtrip_property():
    rng = np.random.default_rng(12)
    for _ in range(50):
        h, w = rng.integers(1, 40, size=2)
        classes = int(rng.integers(2, 6))
        labels = rng.integers(0, classes, size=(h, w), dtype=np.uint8)
        conf = rng.random((h, w), dtype=np.float32) if rng.random() < 0.5 \
            else None
        mask = LabelMask(labels=labels, classes=classes, confidence=conf)
        frame = encode_label_mask(mask)
        again = decode_label_mask(frame[4:])
        assert again.classes == classes
        assert (again.labels == labels).all()
        if conf is None:
            assert again.confidence is None
        else:
            assert (again.confidence == conf).all()


def test_decode_errors():
    with pytest.raises(ProtocolError):
        decode_frame(b"no newline at all")
    with pytest.raises(ProtocolError):
        decode_frame(b"not json\n")
    with pytest.raises(ProtocolError):
        decode_label_mask(b'{"w": 2, "h": 2}\n' + bytes(4))
    with pytest.raises(ProtocolError):  # truncated body
        decode_label_mask(b'{"w": 4, "h": 4, "classes": 2}\n' + bytes(3))
    with pytest.raises(ProtocolError):  # label out of range
        decode_label_mask(b'{"w": 1, "h": 1, "classes": 2}\n' + b"\x07")


def test_label_mask_validation():
    with pytest.raises(ValidationError):
        LabelMask(labels=np.zeros((2, 2), dtype=np.uint8), classes=1)
    with pytest.raises(ValidationError):
        LabelMask(labels=np.full((2, 2), 5, dtype=np.uint8), classes=2)
    with pytest.raises(ValidationError):
        LabelMask(labels=np.zeros((2, 2), dtype=np.uint8), classes=2,
                  confidence=np.zeros((3, 3), dtype=np.float32))


# -- external process -------------------------------------------------------


def test_external_echo_all_background(stub_path):
    backend = Backend(external_cfg(stub_path, "echo"))
    try:
        tile = np.full((64, 48, 3), 200, dtype=np.uint8)
        mask = backend.infer_tile(tile)
        assert (mask.h, mask.w) == (64, 48)
        assert (mask.labels == 0).all()
        # process reused across calls
        again = backend.infer_tile(tile)
        assert (again.labels == 0).all()
    finally:
        backend.close()


def test_external_confidence_passthrough(stub_path):
    backend = Backend(external_cfg(stub_path, "confident"))
    try:
        tile = np.full((16, 16, 3), 255, dtype=np.uint8)
        tile[4:8, 2:10] = (50, 20, 20)
        mask = backend.infer_tile(tile)
        expected = (tile[:, :, 0] < 100).astype(np.uint8)
        assert (mask.labels == expected).all()
        assert mask.confidence is not None
        assert (mask.confidence == np.float32(0.75)).all()
    finally:
        backend.close()


def test_external_crash_fails_after_retries(stub_path):
    backend = Backend(external_cfg(stub_path, "crash"))
    try:
        with pytest.raises(BackendError, match="after 3 attempts"):
            backend.infer_tile(np.zeros((8, 8, 3), dtype=np.uint8))
    finally:
        backend.close()


def test_external_flaky_recovers_on_retry(stub_path, tmp_path):
    state = tmp_path / "flaky-state"
    backend = Backend(external_cfg(stub_path, "flaky", str(state)))
    try:
        mask = backend.infer_tile(np.zeros((8, 8, 3), dtype=np.uint8))
        assert (mask.labels == 0).all()
        assert state.exists()  # first attempt died, retry served
    finally:
        backend.close()


def test_external_timeout(stub_path):
    backend = Backend(external_cfg(stub_path, "sleep", timeout=0.4))
    try:
        start = time.monotonic()
        with pytest.raises(BackendError):
            backend.infer_tile(np.zeros((8, 8, 3), dtype=np.uint8))
        assert time.monotonic() - start < 30  # killed, not waited out
    finally:
        backend.close()


def test_external_wrong_dims_is_protocol_error(stub_path):
    backend = Backend(external_cfg(stub_path, "wrongdims"))
    try:
        with pytest.raises(ProtocolError):
            backend.infer_tile(np.zeros((8, 8, 3), dtype=np.uint8))
    finally:
        backend.close()


# -- training ---------------------------------------------------------------


def test_builtin_not_trainable():
    with pytest.raises(BackendError, match="not trainable"):
        Backend(BackendConfig()).train("manifest.json", TrainingHyperparams())


def test_train_stub_returns_model_and_paper_hyperparams(stub_path, tmp_path):
    state = tmp_path / "train-request.json"
    backend = Backend(external_cfg(stub_path, "train", str(state)))
    try:
        model = backend.train(tmp_path / "manifest.json", TrainingHyperparams())
    finally:
        backend.close()
    assert model == str(state) + ".model"
    request = json.loads(state.read_text())
    assert request["op"] == "train"
    assert request["manifest"].endswith("manifest.json")
    assert request["hp"] == {"steps": 400000, "patch_size": 512,
                             "batch_size": 12, "learning_rate": 0.001,
                             "output_stride": 16}


def test_hyperparams_validation():
    with pytest.raises(ValidationError):
        TrainingHyperparams(steps=0).validate()
    with pytest.raises(ValidationError):
        TrainingHyperparams(patch_size=100).validate()
    hp = TrainingHyperparams(init_model="warm.ckpt")
    assert hp.to_dict()["init_model"] == "warm.ckpt"
