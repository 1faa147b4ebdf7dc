"""End-to-end experiments on the synthetic instance set.

The split is fixed: the last ``queries_per_instance`` views of every
instance (in manifest order) are queries, the remaining views form the
indexed corpus. The whitener is fit on the corpus.
"""

import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .aggregate import AggregatorConfig, KINDS, aggregate
from .data import SynthSpec, image_id, read_manifest, read_ppm, synth_generate, write_ground_truth
from .encoder import (
    TrainConfig,
    encode,
    feature_maps,
    finetune_ap,
    init_params,
    save_checkpoint,
    train_contrastive,
)
from .evaluate import GroundTruth, format_report, mean_ap
from .retrieval import build_db, query, save_db, write_rankings
from .seeding import generator
from .whiten import fit_whitener, l2_normalize, postprocess

log = logging.getLogger(__name__)

DEFAULT_DIMS = (128, 256, 512, 1024, 2048, 4096)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    ids: list


def load_dataset(data_dir, manifest_name="manifest.tsv"):
    manifest = read_manifest(os.path.join(data_dir, manifest_name))
    images = np.stack([read_ppm(os.path.join(data_dir, name)) for name, _ in manifest])
    labels = np.array([label for _, label in manifest])
    return Dataset(images, labels, [image_id(name) for name, _ in manifest])


def split_queries(labels, per_instance=2):
    """Boolean mask marking the last ``per_instance`` views of each label as queries."""
    labels = np.asarray(labels)
    mask = np.zeros(len(labels), dtype=bool)
    for lab in np.unique(labels):
        rows = np.flatnonzero(labels == lab)
        if len(rows) <= per_instance:
            raise ValueError("label %s has too few views to hold out %d" % (lab, per_instance))
        mask[rows[-per_instance:]] = True
    return mask


@dataclass
class Split:
    corpus: Dataset
    queries: Dataset
    ground_truth: list


def make_split(ds, per_instance=2, size=None):
    """Corpus/query datasets plus full-image ground truth for every query."""
    mask = split_queries(ds.labels, per_instance)
    images = ds.images if ds.images is not None else np.zeros((len(mask), 0))
    corpus = Dataset(images[~mask], ds.labels[~mask], [i for i, m in zip(ds.ids, mask) if not m])
    queries = Dataset(images[mask], ds.labels[mask], [i for i, m in zip(ds.ids, mask) if m])
    size = size or ds.images.shape[-1]
    gts = []
    for qid, lab in zip(queries.ids, queries.labels):
        pos = frozenset(i for i, l in zip(corpus.ids, corpus.labels) if l == lab)
        gts.append(GroundTruth(qid, pos, frozenset(), (0.0, 0.0, float(size), float(size)), qid))
    return Split(corpus, queries, gts)


def retrieve(corpus_desc, corpus_ids, query_desc, ground_truth, out_dim=None):
    """Whiten, index, search; returns ``(mAP, rankings, db, whitener)``."""
    whitener = fit_whitener(l2_normalize(corpus_desc), out_dim)
    db = build_db(zip(corpus_ids, postprocess(whitener, corpus_desc)))
    q = postprocess(whitener, query_desc)
    rankings = [query(db, v, query_id=gt.query_id) for v, gt in zip(q, ground_truth)]
    return mean_ap(zip(rankings, ground_truth)), rankings, db, whitener


def evaluate_params(params, split, pooling=None, out_dim=None):
    pooling = pooling or AggregatorConfig()
    cd = encode(params, split.corpus.images, pooling)
    qd = encode(params, split.queries.images, pooling)
    return retrieve(cd, split.corpus.ids, qd, split.ground_truth, out_dim)


@dataclass
class StageResult:
    name: str
    mAP: float
    trace: list


def run_pipeline(workdir, seed=0, instances=16, views=8, pretrain_steps=500, finetune_steps=300,
                 batch_size=32, out_dim=16, temperature=0.5, ap_bins=20, lr=1e-3, pooling=None):
    """Random-init baseline, contrastive pre-training, AP fine-tuning.

    Writes the data, ground truth, checkpoints, descriptor DBs, rankings and
    evaluation reports under ``workdir``; returns one StageResult per stage.
    """
    pooling = pooling or AggregatorConfig()
    data_dir = os.path.join(workdir, "data")
    synth_generate(SynthSpec(instances, views, seed=seed), data_dir)
    split = make_split(load_dataset(data_dir))
    for gt in split.ground_truth:
        write_ground_truth(os.path.join(workdir, "gt"), gt)

    cfg = TrainConfig(batch_size=batch_size, steps=pretrain_steps, seed=seed, temperature=temperature,
                      ap_bins=ap_bins, lr=lr, pooling=pooling)
    init = init_params(generator(seed, "encoder", "init"))
    stages = [("random", init, [])]
    pre, pre_trace = train_contrastive(cfg, split.corpus.images, init)
    stages.append(("contrastive", pre, pre_trace))
    ft, ft_trace = finetune_ap(replace(cfg, steps=finetune_steps), split.corpus.images,
                               split.corpus.labels, pre)
    stages.append(("finetuned", ft, ft_trace))

    results = []
    for name, params, trace in stages:
        mAP, rankings, db, _ = evaluate_params(params, split, pooling, out_dim)
        save_checkpoint(params, os.path.join(workdir, name + ".ckpt"))
        save_db(db, os.path.join(workdir, name + ".db"))
        write_rankings(rankings, os.path.join(workdir, name + ".ranked.tsv"))
        with open(os.path.join(workdir, name + ".report.tsv"), "w") as fh:
            fh.write(format_report(zip(rankings, split.ground_truth)))
        log.info("%s: mAP %.4f", name, mAP)
        results.append(StageResult(name, mAP, trace))
    return results


def ablate_aggregators(params, split, out_dim=None, cfg=None):
    """mAP of the raw last-conv features under each of the five aggregators."""
    cfg = cfg or AggregatorConfig()
    cmaps = feature_maps(params, split.corpus.images)
    qmaps = feature_maps(params, split.queries.images)
    results = {}
    for kind in KINDS:
        kcfg = replace(cfg, kind=kind)
        cd = np.stack([aggregate(f, kcfg) for f in cmaps])
        qd = np.stack([aggregate(f, kcfg) for f in qmaps])
        results[kind] = retrieve(cd, split.corpus.ids, qd, split.ground_truth, out_dim)[0]
    return results


def sweep_dims(dim, requested=DEFAULT_DIMS):
    """Requested whitening dims that fit ``dim``; powers of two up to ``dim`` if none do."""
    dims = [d for d in requested if d <= dim]
    if not dims:
        dims = [2**k for k in range(1, dim.bit_length()) if 2**k <= dim]
        if dim not in dims:
            dims.append(dim)
    return dims


def ablate_dims(params, split, dims=None, pooling=None):
    pooling = pooling or AggregatorConfig()
    cd = encode(params, split.corpus.images, pooling)
    qd = encode(params, split.queries.images, pooling)
    dims = sweep_dims(cd.shape[1], dims or DEFAULT_DIMS)
    return {d: retrieve(cd, split.corpus.ids, qd, split.ground_truth, d)[0] for d in dims}
