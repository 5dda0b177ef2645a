"""Pretraining objectives and the training loop.

Three losses over a batch of paired samples:

* contrastive: symmetric InfoNCE over the similarity matrix of image and
  network embeddings, temperature-divided, positives on the diagonal;
* masked reconstruction: mean absolute error between the (augmented,
  unmasked) volume and the decoder output for its masked twin;
* matching: binary cross-entropy of a linear head over concatenated
  embedding pairs, one positive per subject plus two sampled hard
  negatives, drawn proportionally to the temperature-scaled similarities.

The combined objective is contrastive + alpha * reconstruction +
beta * matching. Training is plain full-graph reverse-mode ascent with
Adam and a cosine learning-rate schedule; a run is bit-reproducible from
its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (LOG_TEMPERATURE, ModelParams, NetworkEncoderCfg,
                       VisualEncoderCfg, clamp_temperature, init_params,
                       network_encode_batch, temperature, visual_decode_batch,
                       visual_forward_batch)
from .errors import BadHyper, BadTemperature, ShapeMismatch
from .optim import LrSchedule, adam_step, cosine_lr, init_adam_state
from .seeds import derive_seed, stream_rng
from .synthdata import (AugmentCfg, MaskSpec, PairedSample, Volume3D,
                        augment_volume, mask_volume, resize_volume)

Array = np.ndarray


# ---------------------------------------------------------------------------
# batch containers
# ---------------------------------------------------------------------------

@dataclass
class BatchEmbeddings:
    """Index-aligned image/network embeddings: row i of each is one subject."""

    V: Array
    W: Array
    subject_ids: list[str]

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.V.shape != self.W.shape or self.V.ndim != 2:
            raise ShapeMismatch(
                f"BatchEmbeddings: V {self.V.shape} vs W {self.W.shape}")
        if self.V.shape[0] < 2:
            raise ShapeMismatch("BatchEmbeddings: contrastive batches need K >= 2")
        if len(self.subject_ids) != self.V.shape[0]:
            raise ShapeMismatch("BatchEmbeddings: subject_ids length mismatch")


@dataclass
class LossReport:
    """Scalar summary of one training step."""

    inc: float
    mim: float
    inm: float
    total: float
    tau: float
    step: int
    epoch: int = 0
    lr: float = 0.0

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "lr": self.lr,
            "inc": self.inc,
            "mim": self.mim,
            "inm": self.inm,
            "total": self.total,
            "tau": self.tau,
        }


@dataclass
class HardNegativePairs:
    """For image i a network j(i) != i, and for network j an image i(j) != j."""

    net_for_image: Array
    image_for_net: Array

    def __post_init__(self):
        self.net_for_image = np.asarray(self.net_for_image, dtype=np.intp)
        self.image_for_net = np.asarray(self.image_for_net, dtype=np.intp)
        k = self.net_for_image.size
        if self.image_for_net.size != k:
            raise ShapeMismatch("HardNegativePairs: unequal lengths")
        if np.any(self.net_for_image == np.arange(k)) or \
           np.any(self.image_for_net == np.arange(k)):
            raise ShapeMismatch("HardNegativePairs: a pair lies on the diagonal")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def similarity_matrix(V, W) -> Tensor:
    """S[i, j] = v_i . w_j for row-aligned embedding matrices."""
    V, W = _as_tensor(V), _as_tensor(W)
    if V.ndim != 2 or W.ndim != 2 or V.shape[1] != W.shape[1]:
        raise ShapeMismatch(f"similarity_matrix: {V.shape} vs {W.shape}")
    return ad.matmul(V, ad.transpose(W))


def inc_loss(V, W, tau) -> Tensor:
    """Symmetric contrastive loss with temperature-divided similarities.

    Row softmax over networks for each image and column softmax over images
    for each network, cross-entropy against the diagonal, averaged and
    halved.
    """
    V, W = _as_tensor(V), _as_tensor(W)
    k = V.shape[0]
    if k < 2:
        raise ShapeMismatch("inc_loss: need K >= 2")
    if isinstance(tau, Tensor):
        if float(tau.data.reshape(-1)[0]) <= 0.0:
            raise BadTemperature("inc_loss: tau must be positive")
        tau_t = tau
    else:
        if float(tau) <= 0.0:
            raise BadTemperature("inc_loss: tau must be positive")
        tau_t = Tensor(np.asarray(float(tau)))
    logits = ad.div(similarity_matrix(V, W), tau_t)
    rows = ad.softmax_rows(logits)
    cols = ad.softmax_rows(ad.transpose(logits))
    row_ce = ad.mean(ad.log(ad.diagonal(rows)))
    col_ce = ad.mean(ad.log(ad.diagonal(cols)))
    return ad.scale(ad.add(row_ce, col_ce), -0.5)


def mim_loss(raw, recon) -> Tensor:
    """Mean absolute voxel difference (L1 normalized by voxel count)."""
    raw_t = _as_tensor(raw.voxels if isinstance(raw, Volume3D) else raw)
    recon_t = _as_tensor(recon.voxels if isinstance(recon, Volume3D) else recon)
    if raw_t.shape != recon_t.shape:
        raise ShapeMismatch(f"mim_loss: {raw_t.shape} vs {recon_t.shape}")
    return ad.mean(ad.absolute(ad.sub(raw_t, recon_t)))


def sample_hard_negatives(S: Array, tau: float, seed: int) -> HardNegativePairs:
    """Sample one off-diagonal partner per row and per column.

    Probabilities follow the contrastive softmax, exp(S/tau) restricted to
    off-diagonal entries, so high-similarity non-matches are preferred.
    """
    S = np.asarray(S, dtype=np.float64)
    k = S.shape[0]
    if S.shape != (k, k) or k < 2:
        raise ShapeMismatch(f"sample_hard_negatives: bad similarity shape {S.shape}")
    if tau <= 0:
        raise BadTemperature("sample_hard_negatives: tau must be positive")
    rng = np.random.default_rng(seed)

    def draw(logit_rows: Array) -> Array:
        out = np.empty(k, dtype=np.intp)
        for i in range(k):
            z = logit_rows[i] / tau
            z[i] = -np.inf
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            out[i] = rng.choice(k, p=p)
        return out

    net_for_image = draw(S.copy())
    image_for_net = draw(S.T.copy())
    return HardNegativePairs(net_for_image, image_for_net)


def inm_loss(V, W, pairs: HardNegativePairs, head_w, head_b) -> Tensor:
    """Matching loss over K positives and 2K hard negatives.

    Each pair is the concatenation [v, w] through a single affine map to
    two logits; targets are class 1 for same-subject pairs, class 0
    otherwise; the loss is the mean softmax cross-entropy.
    """
    V, W = _as_tensor(V), _as_tensor(W)
    head_w, head_b = _as_tensor(head_w), _as_tensor(head_b)
    k, d = V.shape
    if head_w.shape != (2 * d, 2):
        raise ShapeMismatch(f"inm_loss: head weights {head_w.shape} != ({2 * d}, 2)")
    base = np.arange(k)
    img_rows = np.concatenate([base, base, pairs.image_for_net])
    net_rows = np.concatenate([base, pairs.net_for_image, base])
    x = ad.concat_cols(ad.take_rows(V, img_rows), ad.take_rows(W, net_rows))
    logits = ad.add(ad.matmul(x, head_w), head_b)
    targets = np.concatenate([np.ones(k, dtype=np.intp),
                              np.zeros(2 * k, dtype=np.intp)])
    log_p = ad.log(ad.softmax_rows(logits))
    picked = ad.gather_flat(log_p, np.arange(3 * k) * 2 + targets, (3 * k,))
    return ad.scale(ad.mean(picked), -1.0)


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSetup:
    """Everything the forward pass needs besides parameters and data."""

    vcfg: VisualEncoderCfg = VisualEncoderCfg()
    ncfg: NetworkEncoderCfg = NetworkEncoderCfg()
    augment: AugmentCfg = AugmentCfg()
    mask_ratio: float = 0.30


def total_loss(batch: list[PairedSample], params: ModelParams, setup: TrainSetup,
               alpha: float, beta: float, seed: int, step: int = 0,
               ) -> tuple[Tensor, LossReport]:
    """Full forward pass over a batch: augment, encode, decode, all losses.

    alpha/beta scale the reconstruction and matching terms; a zero weight
    skips the branch entirely, so the total equals the enabled terms
    exactly. Augmentation and masking draws are derived from (seed, index).
    """
    if alpha < 0 or beta < 0:
        raise BadHyper("total_loss: alpha and beta must be >= 0")
    if len(batch) < 2:
        raise ShapeMismatch("total_loss: contrastive batches need K >= 2")
    aug_volumes = []
    for i, sample in enumerate(batch):
        vol = sample.volume
        if vol.dims != setup.vcfg.input_dims:
            vol = resize_volume(vol, setup.vcfg.input_dims)
        aug_volumes.append(augment_volume(
            vol, replace(setup.augment, seed=derive_seed(seed, "aug", i))))

    V, _ = visual_forward_batch(aug_volumes, params, setup.vcfg)
    W = network_encode_batch([s.fcn for s in batch], params, setup.ncfg)
    tau_t = temperature(params)
    inc = inc_loss(V, W, tau_t)
    total = inc

    mim_value = 0.0
    if alpha > 0:
        masked = [mask_volume(v, MaskSpec(setup.mask_ratio,
                                          derive_seed(seed, "mask", i)))[0]
                  for i, v in enumerate(aug_volumes)]
        _, tokens = visual_forward_batch(masked, params, setup.vcfg)
        recon = visual_decode_batch(tokens, params, setup.vcfg)
        raw = Tensor(np.stack([v.voxels for v in aug_volumes]))
        # global voxel mean == mean of per-sample mim_loss (equal voxel counts)
        mim = ad.mean(ad.absolute(ad.sub(raw, recon)))
        mim_value = mim.item()
        total = ad.add(total, ad.scale(mim, alpha))

    inm_value = 0.0
    if beta > 0:
        tau_value = params.tau()
        sims = V.data @ W.data.T
        pairs = sample_hard_negatives(sims, tau_value,
                                      derive_seed(seed, "negatives", step))
        inm = inm_loss(V, W, pairs, params["inm.w"], params["inm.b"])
        inm_value = inm.item()
        total = ad.add(total, ad.scale(inm, beta))

    report = LossReport(inc=inc.item(), mim=mim_value, inm=inm_value,
                        total=total.item(), tau=params.tau(), step=step)
    return total, report


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters."""

    epochs: int = 50
    batch_size: int = 16
    lr_initial: float = 3e-3
    lr_min: float = 3e-4
    alpha: float = 1.0
    beta: float = 1.0
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise BadHyper("Hyper: need epochs >= 0 and batch_size >= 2")
        if self.alpha < 0 or self.beta < 0:
            raise BadHyper("Hyper: alpha and beta must be >= 0")
        if self.lr_initial < self.lr_min or self.lr_min < 0:
            raise BadHyper("Hyper: need lr_initial >= lr_min >= 0")


@dataclass
class TrainResult:
    """Final parameters plus everything needed to persist or resume."""

    params: ModelParams
    opt_state: object
    history: list[LossReport]
    step: int
    setup: TrainSetup
    hyper: Hyper


def pretrain(cohort: list[PairedSample], setup: TrainSetup, hyper: Hyper,
             ) -> TrainResult:
    """Seeded, bit-reproducible pretraining over full batches.

    Each epoch shuffles the cohort with its own stream, iterates full
    batches (the trailing partial batch is dropped), and applies one Adam
    step per batch at the cosine learning rate for that step count.
    """
    if len(cohort) < hyper.batch_size:
        raise BadHyper(
            f"pretrain: cohort of {len(cohort)} smaller than batch "
            f"{hyper.batch_size}")
    params = init_params(setup.vcfg, setup.ncfg, derive_seed(hyper.seed, "init"))
    state = init_adam_state(params.tensors)
    steps_per_epoch = len(cohort) // hyper.batch_size
    total_steps = max(hyper.epochs * steps_per_epoch, 1)
    schedule = LrSchedule(hyper.lr_initial, hyper.lr_min, total_steps)

    history: list[LossReport] = []
    step = 0
    for epoch in range(hyper.epochs):
        order = stream_rng(hyper.seed, "shuffle", epoch).permutation(len(cohort))
        for b in range(steps_per_epoch):
            batch = [cohort[j] for j in order[b * hyper.batch_size:
                                              (b + 1) * hyper.batch_size]]
            loss, report = total_loss(batch, params, setup, hyper.alpha,
                                      hyper.beta, derive_seed(hyper.seed, "step", step),
                                      step=step)
            ad.backward(loss)
            lr = cosine_lr(step, schedule)
            grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                     for name, t in params.tensors.items()}
            new_tensors, state = adam_step(params.tensors, grads, state, lr,
                                           hyper.weight_decay)
            params = clamp_temperature(ModelParams(new_tensors))
            report.lr = lr
            report.epoch = epoch
            history.append(report)
            step += 1
    return TrainResult(params=params, opt_state=state, history=history,
                       step=step, setup=setup, hyper=hyper)
