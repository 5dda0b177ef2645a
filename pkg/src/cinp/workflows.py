"""End-to-end pipelines shared by the CLI and the test harness.

Everything here is a pure function of (config, seed, files): cohort
generation, pretraining, embedding extraction, linear probing, network
prompting, the loss-combination ablation, and cross-modal retrieval.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .config import Config
from .encoders import (ModelParams, NetworkEncoderCfg, VisualEncoderCfg,
                       init_params, network_encode_batch, visual_forward_batch)
from .errors import TooFewReferences
from .evalkit import (EmbeddingSet, MetricsReport, ProbeCfg, SplitSpec,
                      linear_probe_fit, metrics_compute, retrieval_top1,
                      split_dataset)
from .objectives import Hyper, LossReport, TrainResult, TrainSetup, pretrain
from .prompting import ReferenceSet, build_reference_set, prompt_classify
from .seeds import derive_seed
from .synthdata import Fcn, PairedSample, gen_paired_cohort, resize_volume
from .optim import init_adam_state

ENCODE_CHUNK = 32

ABLATION_ROWS = (
    ("inc", 0.0, 0.0),
    ("inc+mim", 1.0, 0.0),
    ("inc+inm", 0.0, 1.0),
    ("inc+mim+inm", 1.0, 1.0),
)


# ---------------------------------------------------------------------------
# cohort and training
# ---------------------------------------------------------------------------

def generate_cohort(config: Config) -> list[PairedSample]:
    c = config.cohort
    return gen_paired_cohort(
        n_subjects=c["n_subjects"], k_classes=c["k_classes"],
        dims=tuple(c["dims"]), n_rois=c["n_rois"],
        n_timepoints=c["n_timepoints"],
        seed=derive_seed(config.seed, "cohort"),
        knobs=config.cohort_knobs(),
    )


def train_on(config: Config, cohort: list[PairedSample]) -> tuple[Checkpoint, list[LossReport]]:
    result = pretrain(cohort, config.train_setup(), config.hyper_cfg())
    ckpt = Checkpoint(config=config.as_dict(), params=result.params,
                      opt_state=result.opt_state, step=result.step)
    return ckpt, result.history


def init_checkpoint(config: Config) -> Checkpoint:
    """Untrained parameters under the same init stream pretraining uses."""
    params = init_params(config.visual_cfg(), config.network_cfg(),
                         derive_seed(config.seed, "init"))
    return Checkpoint(config=config.as_dict(), params=params,
                      opt_state=init_adam_state(params.tensors), step=0)


# ---------------------------------------------------------------------------
# embedding extraction
# ---------------------------------------------------------------------------

def _prepared_volume(sample: PairedSample, vcfg: VisualEncoderCfg):
    vol = sample.volume
    if vol.dims != vcfg.input_dims:
        vol = resize_volume(vol, vcfg.input_dims)
    return vol


def embed_images(params: ModelParams, vcfg: VisualEncoderCfg,
                 samples: list[PairedSample]) -> EmbeddingSet:
    """Encode raw (un-augmented) volumes in chunks."""
    rows = []
    for i in range(0, len(samples), ENCODE_CHUNK):
        chunk = samples[i:i + ENCODE_CHUNK]
        emb, _ = visual_forward_batch([_prepared_volume(s, vcfg) for s in chunk],
                                      params, vcfg)
        rows.append(emb.data)
    return EmbeddingSet(
        subject_ids=[s.subject_id for s in samples],
        labels=np.asarray([s.label for s in samples]),
        embeddings=np.concatenate(rows, axis=0),
    )


def embed_networks(params: ModelParams, ncfg: NetworkEncoderCfg,
                   samples: list[PairedSample]) -> EmbeddingSet:
    rows = []
    for i in range(0, len(samples), ENCODE_CHUNK):
        chunk = samples[i:i + ENCODE_CHUNK]
        emb = network_encode_batch([s.fcn for s in chunk], params, ncfg)
        rows.append(emb.data)
    return EmbeddingSet(
        subject_ids=[s.subject_id for s in samples],
        labels=np.asarray([s.label for s in samples]),
        embeddings=np.concatenate(rows, axis=0),
    )


def embed_cohort(ckpt: Checkpoint, samples: list[PairedSample],
                 ) -> tuple[EmbeddingSet, EmbeddingSet]:
    return (embed_images(ckpt.params, ckpt.visual_cfg(), samples),
            embed_networks(ckpt.params, ckpt.network_cfg(), samples))


# ---------------------------------------------------------------------------
# network prompting
# ---------------------------------------------------------------------------

def sample_fcn_bank(samples: list[PairedSample], fraction: float, seed: int,
                    ) -> dict[int, list[PairedSample]]:
    """Per-class sample of ceil(fraction * n_c) subjects (their FCNs)."""
    by_class: dict[int, list[PairedSample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    bank: dict[int, list[PairedSample]] = {}
    for label in sorted(by_class):
        group = by_class[label]
        n_keep = math.ceil(fraction * len(group))
        order = np.random.default_rng(derive_seed(seed, "bank", label)).permutation(len(group))
        bank[label] = [group[i] for i in order[:n_keep]]
    return bank


def prompt_evaluate(ckpt: Checkpoint, test_samples: list[PairedSample],
                    fcn_bank_by_class: dict[int, list[Fcn]], r: int, seed: int,
                    bank_ids_by_class: dict[int, list[str]] | None = None,
                    ) -> tuple[MetricsReport, ReferenceSet]:
    """Embed the FCN bank, build references, classify every test volume.

    For binary problems the AUC score of a sample is the margin between its
    class-1 and class-0 mean similarities.
    """
    ncfg = ckpt.network_cfg()
    vcfg = ckpt.visual_cfg()
    embeddings_by_class = {}
    for label in sorted(fcn_bank_by_class):
        fcns = fcn_bank_by_class[label]
        if len(fcns) < r:
            raise TooFewReferences(
                f"prompt_evaluate: class {label} bank has {len(fcns)} FCNs < r={r}")
        embeddings_by_class[label] = network_encode_batch(fcns, ckpt.params, ncfg).data
    refs = build_reference_set(embeddings_by_class, r,
                               derive_seed(seed, "refs"), bank_ids_by_class)

    images = embed_images(ckpt.params, vcfg, test_samples)
    preds = np.empty(len(test_samples), dtype=np.int64)
    margins = np.empty(len(test_samples))
    for i, v in enumerate(images.embeddings):
        result = prompt_classify(v, refs)
        preds[i] = result.predicted
        if refs.k == 2:
            margins[i] = result.class_means[1] - result.class_means[0]
    labels = images.labels
    scores = margins if refs.k == 2 else None
    return metrics_compute(preds, labels, scores=scores, n_classes=refs.k), refs


def prompt_pipeline(ckpt: Checkpoint, train_samples: list[PairedSample],
                    test_samples: list[PairedSample], r: int, fraction: float,
                    seed: int) -> tuple[MetricsReport, ReferenceSet]:
    """The low-data protocol: bank = a fraction of the training FCNs."""
    bank_samples = sample_fcn_bank(train_samples, fraction, seed)
    bank = {label: [s.fcn for s in group] for label, group in bank_samples.items()}
    ids = {label: [s.subject_id for s in group] for label, group in bank_samples.items()}
    return prompt_evaluate(ckpt, test_samples, bank, r, seed, ids)


# ---------------------------------------------------------------------------
# linear probing and retrieval
# ---------------------------------------------------------------------------

def probe_evaluate(ckpt: Checkpoint, train_samples: list[PairedSample],
                   test_samples: list[PairedSample], probe_cfg: ProbeCfg,
                   ) -> MetricsReport:
    """Fit a linear probe on frozen train image embeddings, score on test."""
    vcfg = ckpt.visual_cfg()
    train = embed_images(ckpt.params, vcfg, train_samples)
    test = embed_images(ckpt.params, vcfg, test_samples)
    k = int(max(train.labels.max(), test.labels.max())) + 1
    model = linear_probe_fit(train.embeddings, train.labels, probe_cfg, n_classes=k)
    preds = model.predict(test.embeddings)
    scores = model.scores(test.embeddings) if k == 2 else None
    return metrics_compute(preds, test.labels, scores=scores, n_classes=k)


def retrieval_evaluate(ckpt: Checkpoint, samples: list[PairedSample]) -> float:
    """Top-1 image-to-network retrieval accuracy over aligned pairs."""
    images, networks = embed_cohort(ckpt, samples)
    return retrieval_top1(images.embeddings, networks.embeddings)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablate(config: Config, cohort: list[PairedSample], r: int | None = None,
           ) -> list[dict]:
    """Pretrain under the four loss combinations and prompt-evaluate each.

    All rows share the config seed, so they see identical inits, shuffles
    and augmentation draws; only the loss toggles differ.
    """
    split = split_dataset(cohort, config.split_spec())
    train_samples, _, test_samples = split
    r_eff = r if r is not None else config.eval["prompt_r"][min(1, len(config.eval["prompt_r"]) - 1)]
    rows = []
    for name, alpha_on, beta_on in ABLATION_ROWS:
        hyper = replace(config.hyper_cfg(),
                        alpha=alpha_on * float(config.hyper["alpha"]),
                        beta=beta_on * float(config.hyper["beta"]))
        result = pretrain(train_samples, config.train_setup(), hyper)
        ckpt = Checkpoint(config=config.as_dict(), params=result.params,
                          opt_state=result.opt_state, step=result.step)
        metrics, _ = prompt_pipeline(ckpt, train_samples, test_samples, r_eff,
                                     config.eval["fcn_fraction"], config.seed)
        rows.append({
            "losses": name,
            "alpha": hyper.alpha,
            "beta": hyper.beta,
            "final_total_loss": result.history[-1].total if result.history else None,
            "metrics": metrics.as_dict(),
        })
    return rows


def ablation_table(rows: list[dict]) -> str:
    lines = [f"{'losses':<14} {'acc':>7} {'auc':>7} {'mcc':>7}"]
    for row in rows:
        m = row["metrics"]
        auc = f"{m['auc']:.4f}" if m.get("auc") is not None else "   -  "
        lines.append(f"{row['losses']:<14} {m['acc']:7.4f} {auc:>7} {m['mcc']:7.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_history(path: str | Path, history: list[LossReport]) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")


def read_history(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
