"""The four-sub-network quality model and its checkpoint format.

Sub-networks A and B process the left and right patch with independent
weights.  C consumes the channel concatenation of their second-conv
(post-pool) activations, D the concatenation of their fourth-conv
(post-pool) activations.  Each sub-network emits 512 features; fusion is
their concatenation in order A, B, C, D (2048 total).  Two heads sit on
the fused vector: the auxiliary head FC11 -> FC21 regresses the 108
naturalness values, the main head FC12 -> FC22 -> FC32 regresses the
quality score, where FC22 sees [relu(FC12(fused)), relu(FC11(fused))].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import CheckpointError, ContractError, FormatError
from .nss import FEATURE_DIM, FeatureStandardizer
from .tensorcore import Tensor

CHECKPOINT_VERSION = "stereoqa-checkpoint-1"
FUSED_DIM = 2048

# (name, kind, geometry); conv geometry (c_out, c_in), dense (out, in)
_ARCH = []
for _stream in ("a", "b"):
    _ARCH += [
        (f"{_stream}.conv1", "conv", (32, 1)),
        (f"{_stream}.conv2", "conv", (32, 32)),
        (f"{_stream}.conv3", "conv", (64, 32)),
        (f"{_stream}.conv4", "conv", (64, 64)),
        (f"{_stream}.conv5", "conv", (128, 64)),
        (f"{_stream}.fc1", "dense", (512, 2048)),
        (f"{_stream}.fc2", "dense", (512, 512)),
    ]
_ARCH += [
    ("c.conv6", "conv", (64, 64)),
    ("c.conv7", "conv", (128, 64)),
    ("c.fc1", "dense", (512, 2048)),
    ("c.fc2", "dense", (512, 512)),
    ("d.fc1", "dense", (512, 8192)),
    ("d.fc2", "dense", (512, 512)),
    ("fc11", "dense", (1024, FUSED_DIM)),
    ("fc21", "dense", (FEATURE_DIM, 1024)),
    ("fc12", "dense", (1024, FUSED_DIM)),
    ("fc22", "dense", (1024, 2048)),
    ("fc32", "dense", (1, 1024)),
]

KERNEL_SIZE = 3

# Init gain per layer, relative to the sqrt(2/fan_in) base scale.  The
# constant-magnitude subgradients of the weighted L1 objective make plain
# He-scaled heads diverge under the default optimizer settings (momentum
# 0.9, lr 1e-3, quality weight 25): the first steps move the prediction by
# lr*weight*|activations|^2, which exceeds the whole target range.  Damping
# the fusion heads keeps that transient bounded; the trunk stays at He
# scale so patch features keep unit variance.
INIT_GAINS = {"fc11": 0.35, "fc12": 0.35, "fc22": 0.35,
              "fc21": 0.1, "fc32": 0.05}


def parameter_manifest():
    """Ordered (name, shape) for every weight and bias tensor."""
    manifest = []
    for name, kind, geom in _ARCH:
        if kind == "conv":
            c_out, c_in = geom
            manifest.append((f"{name}.w", (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE)))
        else:
            out, inp = geom
            manifest.append((f"{name}.w", (out, inp)))
        manifest.append((f"{name}.b", (geom[0],)))
    return manifest


def parameter_count() -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_manifest())


def architecture_hash() -> str:
    text = CHECKPOINT_VERSION + "|" + ";".join(
        f"{name}:{'x'.join(map(str, shape))}" for name, shape in parameter_manifest())
    return hashlib.sha256(text.encode("ascii")).hexdigest()


@dataclass
class NetworkParams:
    """All trainable tensors plus the label standardizer and creation seed.

    ``target_scale`` is the divisor applied to quality scores for training;
    predictions are multiplied back, so the public interface stays in raw
    score units.
    """

    tensors: dict
    standardizer: FeatureStandardizer
    seed: int
    precision: str = "single"
    target_scale: float = 50.0

    def clone(self) -> "NetworkParams":
        tensors = {name: Tensor(t.data.copy(), self.precision, requires_grad=True)
                   for name, t in self.tensors.items()}
        stats = FeatureStandardizer(self.standardizer.mean.copy(),
                                    self.standardizer.std.copy())
        return NetworkParams(tensors=tensors, standardizer=stats,
                             seed=self.seed, precision=self.precision,
                             target_scale=self.target_scale)


@dataclass
class ForwardOutput:
    q_hat: Tensor        # shape (1,)
    nss_hat: Tensor      # shape (108,)
    fused: Tensor        # shape (2048,)


def build_network(seed: int, precision: str = "single",
                  standardizer: FeatureStandardizer | None = None) -> NetworkParams:
    """Fresh parameters: He-scaled normal weights, zero biases, seeded draw
    in manifest order."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tensors = {}
    for name, shape in parameter_manifest():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = INIT_GAINS.get(name[:-2], 1.0)
            data = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(data, precision, requires_grad=True)
    if standardizer is None:
        standardizer = FeatureStandardizer.identity(FEATURE_DIM)
    return NetworkParams(tensors=tensors, standardizer=standardizer,
                         seed=int(seed), precision=precision)


def _conv_block(t, name, x):
    return tc.relu(tc.conv2d(x, t[f"{name}.w"], t[f"{name}.b"], padding=1))


def _dense_block(t, name, x):
    return tc.relu(tc.dense(x, t[f"{name}.w"], t[f"{name}.b"]))


def _run(params: NetworkParams, left: Tensor, right: Tensor, detach_aux: bool,
         batched: bool) -> ForwardOutput:
    t = params.tensors
    caxis = 1 if batched else 0            # channel axis for feature maps
    flat = (lambda h, n: tc.reshape(h, (h.shape[0], n))) if batched else \
        (lambda h, n: tc.reshape(h, (n,)))

    def stream(prefix, x):
        h = _conv_block(t, f"{prefix}.conv1", x)
        h = _conv_block(t, f"{prefix}.conv2", h)
        h = tc.maxpool2(h)
        tap_c = h                                # 32ch @ 16x16
        h = _conv_block(t, f"{prefix}.conv3", h)
        h = _conv_block(t, f"{prefix}.conv4", h)
        h = tc.maxpool2(h)
        tap_d = h                                # 64ch @ 8x8
        h = _conv_block(t, f"{prefix}.conv5", h)
        h = tc.maxpool2(h)
        v = flat(h, 128 * 4 * 4)
        v = _dense_block(t, f"{prefix}.fc1", v)
        v = _dense_block(t, f"{prefix}.fc2", v)
        return v, tap_c, tap_d

    va, tap_ca, tap_da = stream("a", left)
    vb, tap_cb, tap_db = stream("b", right)

    hc = tc.concat([tap_ca, tap_cb], axis=caxis)     # 64ch @ 16x16
    hc = _conv_block(t, "c.conv6", hc)
    hc = tc.maxpool2(hc)
    hc = _conv_block(t, "c.conv7", hc)
    hc = tc.maxpool2(hc)
    vc = flat(hc, 128 * 4 * 4)
    vc = _dense_block(t, "c.fc1", vc)
    vc = _dense_block(t, "c.fc2", vc)

    hd = tc.concat([tap_da, tap_db], axis=caxis)     # 128ch @ 8x8
    vd = flat(hd, 128 * 8 * 8)
    vd = _dense_block(t, "d.fc1", vd)
    vd = _dense_block(t, "d.fc2", vd)

    vaxis = 1 if batched else 0
    fused = tc.concat([va, vb, vc, vd], axis=vaxis)

    fc11_act = tc.relu(tc.dense(fused, t["fc11.w"], t["fc11.b"]))
    nss_hat = tc.dense(fc11_act, t["fc21.w"], t["fc21.b"])

    fc12_act = tc.relu(tc.dense(fused, t["fc12.w"], t["fc12.b"]))
    shared = fc11_act.detach() if detach_aux else fc11_act
    fc22_act = tc.relu(tc.dense(tc.concat([fc12_act, shared], axis=vaxis),
                                t["fc22.w"], t["fc22.b"]))
    q_hat = tc.dense(fc22_act, t["fc32.w"], t["fc32.b"])

    return ForwardOutput(q_hat=q_hat, nss_hat=nss_hat, fused=fused)


def forward(params: NetworkParams, pair, detach_aux: bool = False) -> ForwardOutput:
    """Run the network on one normalized patch pair.

    ``detach_aux`` cuts FC11 out of the main head's gradient path (and the
    auxiliary head with it), which is the ablation switch's mechanism.
    """
    left = pair.left if isinstance(pair.left, Tensor) else Tensor(pair.left, params.precision)
    right = pair.right if isinstance(pair.right, Tensor) else Tensor(pair.right, params.precision)
    if left.shape != (1, 32, 32) or right.shape != (1, 32, 32):
        raise ContractError(
            f"patches must be [1,32,32], got {left.shape} and {right.shape}")
    return _run(params, left, right, detach_aux, batched=False)


def forward_batch(params: NetworkParams, lefts, rights,
                  detach_aux: bool = False) -> ForwardOutput:
    """Vectorized forward over a whole patch batch ([B,1,32,32] per view).

    Produces q_hat [B,1], nss_hat [B,108] and fused [B,2048]; numerically
    equivalent to calling :func:`forward` per pair.
    """
    left = lefts if isinstance(lefts, Tensor) else Tensor(lefts, params.precision)
    right = rights if isinstance(rights, Tensor) else Tensor(rights, params.precision)
    if left.data.ndim != 4 or left.shape[1:] != (1, 32, 32) or left.shape != right.shape:
        raise ContractError(
            f"batches must be [B,1,32,32], got {left.shape} and {right.shape}")
    return _run(params, left, right, detach_aux, batched=True)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: NetworkParams, path) -> None:
    manifest = parameter_manifest()
    for name, shape in manifest:
        if name not in params.tensors:
            raise ContractError(f"missing parameter {name!r}")
        if params.tensors[name].shape != shape:
            raise ContractError(f"parameter {name!r} has shape "
                                f"{params.tensors[name].shape}, expected {shape}")
    lines = [
        CHECKPOINT_VERSION,
        f"arch: {architecture_hash()}",
        f"seed: {params.seed}",
        f"target-scale: {params.target_scale!r}",
        f"standardizer-mean: {','.join(repr(float(v)) for v in params.standardizer.mean)}",
        f"standardizer-std: {','.join(repr(float(v)) for v in params.standardizer.std)}",
        f"tensors: {len(manifest)}",
    ]
    lines += [f"{name} {'x'.join(map(str, shape))}" for name, shape in manifest]
    lines.append("end-header")
    header = "\n".join(lines) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for name, _ in manifest:
            fh.write(params.tensors[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"end-header\n"
    cut = raw.find(marker)
    if cut < 0:
        raise FormatError(f"{path}: missing end-header marker")
    header_lines = raw[:cut].decode("ascii").splitlines()
    body = raw[cut + len(marker):]

    if not header_lines or header_lines[0] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")

    fields = {}
    for line in header_lines[1:7]:
        if ": " not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(": ", 1)
        fields[key] = value
    manifest_lines = header_lines[7:]

    if fields.get("arch") != architecture_hash():
        raise CheckpointError(
            f"{path}: architecture hash mismatch (checkpoint {fields.get('arch')!r})")
    expected = parameter_manifest()
    if len(manifest_lines) != len(expected):
        raise FormatError(f"{path}: manifest lists {len(manifest_lines)} tensors, "
                          f"expected {len(expected)}")
    for line, (name, shape) in zip(manifest_lines, expected):
        want = f"{name} {'x'.join(map(str, shape))}"
        if line != want:
            raise FormatError(f"{path}: manifest entry {line!r} != {want!r}")

    try:
        mean = np.array([float(v) for v in fields["standardizer-mean"].split(",")])
        std = np.array([float(v) for v in fields["standardizer-std"].split(",")])
        seed = int(fields["seed"])
        target_scale = float(fields["target-scale"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header field ({exc})") from exc

    total = sum(int(np.prod(shape)) for _, shape in expected)
    if len(body) != 4 * total:
        raise FormatError(f"{path}: body holds {len(body)} bytes, "
                          f"expected {4 * total} (truncated or padded)")

    flat = np.frombuffer(body, dtype="<f4")
    tensors = {}
    offset = 0
    for name, shape in expected:
        size = int(np.prod(shape))
        tensors[name] = Tensor(flat[offset:offset + size].reshape(shape),
                               "single", requires_grad=True)
        offset += size
    stats = FeatureStandardizer(mean, std)
    return NetworkParams(tensors=tensors, standardizer=stats, seed=seed,
                         precision="single", target_scale=target_scale)
