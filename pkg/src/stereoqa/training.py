"""Multi-task loss, content-independent splits, the training loop, and
image-level prediction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import evalmetrics, imagepipe, tensorcore as tc
from .errors import ContractError, DegenerateDataError, NumericError
from .network import NetworkParams, ForwardOutput, forward, forward_batch
from .nss import FEATURE_DIM, FeatureStandardizer
from .tensorcore import GradTape, SgdState, Tensor, sgd_update


@dataclass
class TrainConfig:
    """Optimizer and loss settings; ``target_scale`` divides quality scores
    during optimization (predictions are scaled back automatically)."""

    lambda_weight: float = 25.0
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    auxiliary_enabled: bool = True
    target_scale: float = 50.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ContractError("lambda_weight must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.target_scale <= 0:
            raise ContractError("target_scale must be > 0")


@dataclass
class SplitManifest:
    """Disjoint train/val/test reference-content sets for one run."""

    run_index: int
    train_refs: tuple
    val_refs: tuple
    test_refs: tuple
    seed: int

    def __post_init__(self):
        sets = [set(self.train_refs), set(self.val_refs), set(self.test_refs)]
        for i in range(3):
            for j in range(i + 1, 3):
                if sets[i] & sets[j]:
                    raise ContractError(
                        f"run {self.run_index}: reference sets overlap: "
                        f"{sorted(sets[i] & sets[j])}")

    def role_of(self, ref_id: str) -> str:
        if ref_id in set(self.train_refs):
            return "train"
        if ref_id in set(self.val_refs):
            return "val"
        if ref_id in set(self.test_refs):
            return "test"
        raise ContractError(f"reference {ref_id!r} not in any split of run "
                            f"{self.run_index}")


def make_splits(samples, runs: int = 10, seed: int = 0):
    """Shuffle reference ids per run and cut 60/20/20 by count; remainders
    go to the training set, and every distorted sample follows its
    reference."""
    refs = sorted({s.ref_id for s in samples})
    if len(refs) < 5:
        raise ContractError(f"need >= 5 distinct reference contents, got {len(refs)}")
    manifests = []
    for run in range(1, runs + 1):
        rng = np.random.default_rng([seed, run])
        order = list(np.array(refs)[rng.permutation(len(refs))])
        n = len(order)
        n_val = n // 5
        n_test = n // 5
        n_train = n - n_val - n_test
        manifests.append(SplitManifest(
            run_index=run,
            train_refs=tuple(order[:n_train]),
            val_refs=tuple(order[n_train:n_train + n_val]),
            test_refs=tuple(order[n_train + n_val:]),
            seed=seed,
        ))
    return manifests


@dataclass
class SampleData:
    """One stereo sample with its views and raw naturalness features in memory.

    ``features`` may be None for samples whose statistics fitting failed
    (heavily degraded inputs can degenerate a subband); such samples are
    still predictable and evaluable but are dropped from training.
    """

    sample: object                # datakit.StereoSample
    left: imagepipe.GrayImage
    right: imagepipe.GrayImage
    features: np.ndarray = None   # raw 108-dim label

    def __post_init__(self):
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape != (FEATURE_DIM,):
                raise ContractError(
                    f"sample {self.sample.id}: features shape {self.features.shape}")


def multitask_loss(out: ForwardOutput, dmos: float, nss_label, lambda_weight: float,
                   auxiliary_enabled: bool = True):
    """Combined patch loss: lambda * |q_hat - dmos| + mean_i |nss_hat_i - label_i|.

    Returns the loss tensor plus a float breakdown.  With the auxiliary
    task disabled the second term is identically zero (and the forward
    pass is expected to have detached the shared FC11 activation).
    """
    precision = out.q_hat.precision
    q_term = tc.l1_loss(out.q_hat, Tensor(np.array([dmos]), precision))
    q_value = q_term.item()
    if auxiliary_enabled:
        label = np.asarray(nss_label, dtype=np.float64)
        if label.shape != (FEATURE_DIM,):
            raise ContractError(f"nss label shape {label.shape}")
        aux_term = tc.l1_loss(out.nss_hat, Tensor(label, precision))
        aux_value = aux_term.item()
        loss = tc.add(tc.scale(q_term, lambda_weight), aux_term)
    else:
        aux_value = 0.0
        loss = tc.scale(q_term, lambda_weight)
    breakdown = {"quality": lambda_weight * q_value, "auxiliary": aux_value}
    return loss, breakdown


def _patches_for(data: SampleData, standardizer: FeatureStandardizer):
    label = standardizer.transform(data.features)
    return imagepipe.patch_pairs(data.left, data.right, data.sample.id,
                                 data.sample.dmos, nss_label=label)


class PatchArrays:
    """All training patches stacked into flat arrays for batched steps.

    Quality targets are stored divided by ``target_scale``.
    """

    def __init__(self, pairs, precision: str, target_scale: float = 1.0):
        dtype = np.float32 if precision == "single" else np.float64
        self.lefts = np.stack([p.left for p in pairs]).astype(dtype)
        self.rights = np.stack([p.right for p in pairs]).astype(dtype)
        self.dmos = np.array([p.dmos / target_scale for p in pairs], dtype=dtype)
        self.labels = np.stack([p.nss_label for p in pairs]).astype(dtype)

    def __len__(self):
        return len(self.dmos)


def predict_image(params: NetworkParams, left: imagepipe.GrayImage,
                  right: imagepipe.GrayImage) -> float:
    """Mean of the per-patch quality predictions over the shared grid,
    rescaled to raw score units."""
    pairs = imagepipe.patch_pairs(left, right, "predict", 0.0)
    out = forward_batch(params,
                        np.stack([p.left for p in pairs]),
                        np.stack([p.right for p in pairs]))
    return float(np.mean(out.q_hat.data)) * params.target_scale


def _split_data(data, manifest: SplitManifest):
    buckets = {"train": [], "val": [], "test": []}
    for item in data:
        buckets[manifest.role_of(item.sample.ref_id)].append(item)
    return buckets


def _validation_scores(params, val_data):
    preds = [predict_image(params, d.left, d.right) for d in val_data]
    targets = [d.sample.dmos for d in val_data]
    try:
        plcc = evalmetrics.plcc(preds, targets)
    except (DegenerateDataError, ContractError):
        plcc = None
    try:
        srocc = evalmetrics.srocc(preds, targets)
    except (DegenerateDataError, ContractError):
        srocc = None
    return plcc, srocc


def train(config: TrainConfig, manifest: SplitManifest, data,
          initial_params: NetworkParams = None, log_stream=None):
    """Train one run; returns (best parameters by validation PLCC, log rows).

    ``data`` is a sequence of :class:`SampleData`; the feature
    standardizer is fitted on the training split only.  All shuffling
    derives from (config.seed, manifest.run_index), so reruns are
    bit-identical.
    """
    from .network import build_network

    buckets = _split_data(data, manifest)
    train_data = [d for d in buckets["train"] if d.features is not None]
    val_data = buckets["val"]
    if not train_data:
        raise ContractError("training split is empty (or has no labeled samples)")

    standardizer = FeatureStandardizer.fit(
        np.stack([d.features for d in train_data]))

    if initial_params is None:
        net_seed = int(np.random.SeedSequence(
            (config.seed, manifest.run_index)).generate_state(1)[0])
        params = build_network(net_seed, precision="single",
                               standardizer=standardizer)
    else:
        params = initial_params.clone()
        params.standardizer = standardizer
    params.target_scale = config.target_scale

    patches = []
    for item in train_data:
        patches.extend(_patches_for(item, standardizer))
    arrays = PatchArrays(patches, params.precision, config.target_scale)

    state = SgdState(learning_rate=config.learning_rate,
                     momentum=config.momentum,
                     weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, manifest.run_index, 7])

    best_plcc = None
    best_params = params.clone()
    log_rows = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(patches))
        epoch_loss = 0.0
        epoch_q = 0.0
        epoch_aux = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss_value, breakdown = _train_step(params, arrays, idx, config, state)
            epoch_loss += loss_value
            epoch_q += breakdown["quality"]
            epoch_aux += breakdown["auxiliary"]
            n_batches += 1
        epoch_loss /= n_batches
        epoch_q /= n_batches
        epoch_aux /= n_batches

        val_plcc, val_srocc = (None, None)
        if val_data:
            val_plcc, val_srocc = _validation_scores(params, val_data)
        if val_plcc is not None and (best_plcc is None or val_plcc > best_plcc):
            best_plcc = val_plcc
            best_params = params.clone()

        row = {"epoch": epoch, "train_loss": epoch_loss,
               "quality_term": epoch_q, "auxiliary_term": epoch_aux,
               "val_plcc": val_plcc, "val_srocc": val_srocc}
        log_rows.append(row)
        if log_stream is not None:
            log_stream.write(format_log_row(row) + "\n")
            log_stream.flush()

    if best_plcc is None:
        best_params = params.clone()
    return best_params, log_rows


def _train_step(params: NetworkParams, arrays: PatchArrays, idx,
                config: TrainConfig, state: SgdState):
    """One batched SGD step; the batched loss equals the mean of the
    per-patch multi-task losses."""
    nb = len(idx)
    precision = params.precision
    aux_on = config.auxiliary_enabled
    with GradTape() as tape:
        out = forward_batch(params, arrays.lefts[idx], arrays.rights[idx],
                            detach_aux=not aux_on)
        q_flat = tc.reshape(out.q_hat, (nb,))
        q_term = tc.l1_loss(q_flat, Tensor(arrays.dmos[idx], precision))
        q_value = float(config.lambda_weight) * q_term.item()
        if aux_on:
            aux_term = tc.l1_loss(out.nss_hat, Tensor(arrays.labels[idx], precision))
            aux_value = aux_term.item()
            batch_loss = tc.add(tc.scale(q_term, config.lambda_weight), aux_term)
        else:
            aux_value = 0.0
            batch_loss = tc.scale(q_term, config.lambda_weight)
        value = batch_loss.item()
        if not np.isfinite(value):
            raise NumericError(
                f"non-finite batch loss (quality {q_value}, auxiliary {aux_value})")
        tape.backward(batch_loss)

    grads = {name: t.grad for name, t in params.tensors.items()
             if t.grad is not None}
    sgd_update(params.tensors, grads, state)
    return value, {"quality": q_value, "auxiliary": aux_value}


LOG_COLUMNS = ("epoch", "train_loss", "quality_term", "auxiliary_term",
               "val_plcc", "val_srocc")


def format_log_row(row: dict) -> str:
    def fmt(v):
        if v is None:
            return "nan"
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    return ",".join(fmt(row[c]) for c in LOG_COLUMNS)


def write_training_log(path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(format_log_row(row) + "\n")
