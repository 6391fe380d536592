"""Training, evaluation, checkpointing, and the scripted experiments.

Every random choice derives from the run seed through tagged SeedSequences,
so a (config, seed) pair fully determines parameter initialization, shuffle
order, per-transaction memory initialization, and therefore checkpoints and
metrics files byte-for-byte. Resuming from a checkpoint replays the same
derived streams and reproduces the uninterrupted run exactly.
"""
from __future__ import annotations

import dataclasses
import json
import os
import statistics
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import Tape, Tensor, no_grad
from .cascade import CMNTM, CascadeConfig, EwmaModel, LstmBaseline, MeanModel
from .config import TrainConfig, config_from_dict, config_json
from .errors import (CheckpointError, DegenerateInputError, DomainError, ShapeError,
                     TimingMonotonicityError, TrainingDivergedError)
from .retrieval import CandidateDB, rank, recall_at_k, similarity_scores, transaction_loss
from .synthdata import SyntheticDataset, TaskConfig, Transaction, gen_distractor

METRICS_HEADER = "epoch,train_loss,r1,r5,r8,r10,mean_r5_r8"
RECALL_KS = (1, 5, 8, 10)

# Seed-derivation tags; one per independent random stream.
_MODEL_TAG = 201
_SHUFFLE_TAG = 202
_TRAIN_MEM_TAG = 203
_EVAL_MEM_TAG = 204
_TIMING_TAG = 205
_ORDER_TAG = 206


def _rngs(tag: int, seed: int, indices: Sequence[int], extra: int | None = None) -> list:
    entropy = [tag, seed] + ([extra] if extra is not None else [])
    return [np.random.default_rng(np.random.SeedSequence(entropy + [int(i)]))
            for i in indices]


def build_model(cfg: TrainConfig):
    """Instantiate the configured model kind with seed-derived initialization."""
    rng = np.random.default_rng(np.random.SeedSequence([_MODEL_TAG, cfg.seed]))
    if cfg.model == "cmntm":
        return CMNTM(cfg.cascade, rng)
    if cfg.model == "vntm":
        return CMNTM(cfg.cascade.with_stages(1), rng)
    if cfg.model == "lstm":
        return LstmBaseline(cfg.cascade.feature_dim, cfg.cascade.hidden_size, rng)
    if cfg.model == "ewma":
        return EwmaModel(cfg.ewma_alpha)
    if cfg.model == "mean":
        return MeanModel()
    raise ValueError(f"unknown model kind {cfg.model!r}")


def stack_batch(transactions: Sequence[Transaction],
                expected_turns: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack padded transactions into (queries, target_ids, target_features)."""
    for txn in transactions:
        if txn.num_turns != expected_turns:
            raise ShapeError("stack_batch",
                             f"transaction has {txn.num_turns} turns, expected padded length {expected_turns}")
    queries = np.stack([t.queries for t in transactions])
    target_ids = np.stack([t.target_ids for t in transactions])
    target_features = np.stack([t.target_features for t in transactions])
    return queries, target_ids, target_features


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; moments are float32 like the parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total_sq = 0.0
    for p in params.values():
        if p.grad is not None:
            total_sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    total = float(np.sqrt(total_sq))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict_dataset(model, dataset: SyntheticDataset, eval_batch_size: int, seed: int,
                    queries_override: np.ndarray | None = None) -> np.ndarray:
    """Eval-mode per-turn predictions for every transaction, shape (T, N, D).

    ``queries_override`` replaces the stored queries (same leading dimension,
    any turn count); per-transaction state initialization depends only on
    (seed, transaction index), so subsets and overrides stay comparable with a
    standard evaluation pass.
    """
    txns = dataset.transactions
    count = len(txns)
    if queries_override is not None and queries_override.shape[0] != count:
        raise ShapeError("predict_dataset",
                         f"override has {queries_override.shape[0]} rows for {count} transactions")
    was_training = getattr(model, "training", False)
    model.set_training(False)
    chunks = []
    try:
        for start in range(0, count, eval_batch_size):
            idx = list(range(start, min(start + eval_batch_size, count)))
            if queries_override is not None:
                queries = queries_override[idx[0]:idx[-1] + 1]
            else:
                queries, _, _ = stack_batch([txns[i] for i in idx], dataset.max_turns)
            state = model.initial_state(_rngs(_EVAL_MEM_TAG, seed, idx))
            with no_grad():
                preds, _ = model.forward_transaction(queries, state)
            chunks.append(np.stack([p.data for p in preds], axis=1))
    finally:
        model.set_training(was_training)
    return np.concatenate(chunks, axis=0)


def _top_ids(prediction: np.ndarray, db: CandidateDB, k: int) -> np.ndarray:
    return rank(similarity_scores(prediction, db), db.ids).ids[:k]


def _recall_report(final_preds: np.ndarray, dataset: SyntheticDataset) -> dict:
    rankings = [rank(similarity_scores(p, dataset.db), dataset.db.ids) for p in final_preds]
    targets = [int(t.target_ids[-1]) for t in dataset.transactions]
    report = {"count": len(rankings)}
    for k in RECALL_KS:
        report[f"r{k}"] = recall_at_k(rankings, targets, k)
    report["mean_r5_r8"] = (report["r5"] + report["r8"]) / 2.0
    return report


def evaluate_model(model, dataset: SyntheticDataset,
                   eval_batch_size: int = 256, seed: int = 0) -> dict:
    """Final-turn retrieval metrics over the whole candidate db."""
    preds = predict_dataset(model, dataset, eval_batch_size, seed)
    return _recall_report(preds[:, -1], dataset)


def evaluate_checkpoint(path: str, dataset: SyntheticDataset) -> dict:
    ckpt = load_checkpoint(path)
    model = restore_model(ckpt)
    return evaluate_model(model, dataset, ckpt.cfg.eval_batch_size, ckpt.cfg.seed)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    cfg: TrainConfig
    epoch: int
    adam_step: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]


def save_checkpoint(path: str, model, opt: Adam | None, cfg: TrainConfig, epoch: int) -> None:
    entries: dict[str, np.ndarray] = {}
    config_data, config_len = ckpt_io.pack_text(config_json(cfg))
    entries["meta.config"] = config_data
    entries["meta.config_len"] = config_len
    entries["meta.epoch"] = np.asarray([float(epoch)], dtype=np.float32)
    entries["meta.adam_step"] = np.asarray(
        [float(opt.step_count if opt is not None else 0)], dtype=np.float32)
    for name, p in model.parameters().items():
        entries[f"param.{name}"] = p.data
    for name, b in model.buffers().items():
        entries[f"buffer.{name}"] = b
    if opt is not None:
        for name in model.parameters():
            entries[f"adam.m.{name}"] = opt.m[name]
            entries[f"adam.v.{name}"] = opt.v[name]
    ckpt_io.save_entries(path, entries)


def load_checkpoint(path: str) -> Checkpoint:
    entries = ckpt_io.load_entries(path)
    try:
        cfg_text = ckpt_io.unpack_text(entries["meta.config"], entries["meta.config_len"])
        epoch = int(entries["meta.epoch"].reshape(-1)[0])
        adam_step = int(entries["meta.adam_step"].reshape(-1)[0])
    except KeyError as e:
        raise CheckpointError(f"{path}: missing meta entry {e}") from None
    cfg = config_from_dict(json.loads(cfg_text))
    params, buffers, adam_m, adam_v = {}, {}, {}, {}
    for name, arr in entries.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("buffer."):
            buffers[name[len("buffer."):]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
    return Checkpoint(cfg, epoch, adam_step, params, buffers, adam_m, adam_v)


def restore_model(ckpt: Checkpoint):
    """Rebuild the checkpointed model and load its parameters and buffers."""
    model = build_model(ckpt.cfg)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(params))
        raise CheckpointError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        if p.data.shape != ckpt.params[name].shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {ckpt.params[name].shape}, expected {p.data.shape}")
        p.data = ckpt.params[name].copy()
    if ckpt.buffers:
        model.set_buffers(ckpt.buffers)
    return model


def _restore_optimizer(opt: Adam, ckpt: Checkpoint) -> None:
    opt.step_count = ckpt.adam_step
    for name in opt.params:
        if name in ckpt.adam_m:
            opt.m[name] = ckpt.adam_m[name].copy()
            opt.v[name] = ckpt.adam_v[name].copy()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: object
    metrics: list[dict]
    checkpoint_path: str | None
    metrics_path: str | None


def default_datasets(cfg: TrainConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Generate the train/val splits the config describes (shared candidate db)."""
    train_ds = gen_distractor(cfg.task, cfg.train_count, split="train")
    val_ds = gen_distractor(cfg.task, cfg.val_count, split="val")
    return train_ds, val_ds


def _metrics_row_text(row: dict) -> str:
    return (f"{row['epoch']},{row['train_loss']:.6f},{row['r1']:.6f},{row['r5']:.6f},"
            f"{row['r8']:.6f},{row['r10']:.6f},{row['mean_r5_r8']:.6f}")


def write_metrics_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(_metrics_row_text(row) + "\n")


def _diverged_message(epoch: int, batch_index: int, loss_value: float,
                      params: dict[str, Tensor]) -> str:
    norms = {name: float(np.linalg.norm(p.data)) for name, p in params.items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
    detail = ", ".join(f"{name}={value:.3e}" for name, value in worst)
    return (f"non-finite loss {loss_value!r} at epoch {epoch}, batch {batch_index}; "
            f"largest parameter norms: {detail}")


def train(cfg: TrainConfig, out_dir: str | None = None,
          train_ds: SyntheticDataset | None = None,
          val_ds: SyntheticDataset | None = None,
          resume_from: str | None = None,
          log=None) -> TrainResult:
    """Train the configured model; returns the model, per-epoch metrics, paths.

    Each epoch shuffles transactions with an epoch-derived generator, steps
    Adam on every batch (trailing batches of one transaction are dropped:
    batch statistics and in-batch negatives need at least two rows), then
    evaluates final-turn recall on the validation split. Per-transaction
    memory initialization is re-drawn on every visit from (seed, epoch,
    transaction index).
    """
    if train_ds is None or val_ds is None:
        gen_train, gen_val = default_datasets(cfg)
        train_ds = train_ds or gen_train
        val_ds = val_ds or gen_val
    model = build_model(cfg)
    params = model.parameters()
    opt = Adam(params, cfg.learning_rate)
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if config_json(ckpt.cfg) != config_json(cfg):
            raise CheckpointError("resume config does not match checkpoint config")
        model = restore_model(ckpt)
        params = model.parameters()
        opt = Adam(params, cfg.learning_rate)
        _restore_optimizer(opt, ckpt)
        start_epoch = ckpt.epoch
    trainable = len(params) > 0
    turns = train_ds.max_turns
    metrics_rows: list[dict] = []
    count = len(train_ds.transactions)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([_SHUFFLE_TAG, cfg.seed, epoch])).permutation(count)
        model.set_training(True)
        loss_sum, loss_batches = 0.0, 0
        for batch_index, start in enumerate(range(0, count, cfg.batch_size)):
            idx = [int(i) for i in order[start:start + cfg.batch_size]]
            if len(idx) < 2:
                continue
            queries, _, target_features = stack_batch([train_ds.transactions[i] for i in idx], turns)
            state = model.initial_state(_rngs(_TRAIN_MEM_TAG, cfg.seed, idx, extra=epoch))
            targets = [Tensor(np.ascontiguousarray(target_features[:, n])) for n in range(turns)]
            try:
                with Tape() as tape:
                    preds, _ = model.forward_transaction(queries, state)
                    loss = transaction_loss(preds, targets)
            except DomainError as e:
                raise TrainingDivergedError(
                    _diverged_message(epoch, batch_index, float("nan"), params)
                    + f"; forward failed: {e}") from e
            loss_value = float(loss.data.reshape(()))
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    _diverged_message(epoch, batch_index, loss_value, params))
            if trainable:
                opt.zero_grad()
                tape.backward(loss)
                clip_gradients(params, cfg.grad_clip)
                opt.step()
            loss_sum += loss_value
            loss_batches += 1
        train_loss = loss_sum / max(loss_batches, 1)
        report = evaluate_model(model, val_ds, cfg.eval_batch_size, cfg.seed)
        row = {"epoch": epoch, "train_loss": train_loss, **{f"r{k}": report[f"r{k}"] for k in RECALL_KS},
               "mean_r5_r8": report["mean_r5_r8"]}
        metrics_rows.append(row)
        if log is not None:
            log(_metrics_row_text(row))
        if out_dir is not None and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_epoch{epoch}.bin"),
                            model, opt, cfg, epoch)
    checkpoint_path = metrics_path = None
    if out_dir is not None:
        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(checkpoint_path, model, opt, cfg, cfg.epochs)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics_csv(metrics_rows, metrics_path)
    return TrainResult(model, metrics_rows, checkpoint_path, metrics_path)


# ---------------------------------------------------------------------------
# experiments


def full_model_gradient_check(num_stages: int = 2, mem_locations: int = 4, mem_width: int = 8,
                              feature_dim: int = 8, hidden_size: int = 16, turns: int = 3,
                              batch: int = 2, h: float = 1e-4, seed: int = 0) -> float:
    """Finite-difference check of a full transaction loss in double precision.

    Returns the maximum relative error over every parameter coordinate of a
    small but complete model (all stages, heads, batch norm, fusion, loss).
    """
    from .autodiff import gradient_check

    cc = CascadeConfig(num_stages=num_stages, mem_locations=mem_locations,
                       mem_width=mem_width, hidden_size=hidden_size, feature_dim=feature_dim)
    rng = np.random.default_rng(np.random.SeedSequence([_MODEL_TAG, seed]))
    model = CMNTM(cc, rng, dtype=np.float64)
    data_rng = np.random.default_rng(np.random.SeedSequence([_TIMING_TAG, seed]))
    queries = data_rng.normal(size=(batch, turns, feature_dim))
    raw_targets = data_rng.normal(size=(turns, batch, feature_dim))
    raw_targets /= np.linalg.norm(raw_targets, axis=2, keepdims=True)
    targets = [Tensor(raw_targets[n]) for n in range(turns)]
    state = model.initial_state(_rngs(_EVAL_MEM_TAG, seed, range(batch)))

    def f() -> Tensor:
        preds, _ = model.forward_transaction(queries, state)
        return transaction_loss(preds, targets)

    return gradient_check(f, list(model.parameters().values()), h=h)


def ablate_num_memories(cfg: TrainConfig, stage_counts: Sequence[int],
                        out_dir: str | None = None,
                        train_ds: SyntheticDataset | None = None,
                        val_ds: SyntheticDataset | None = None,
                        log=None) -> list[dict]:
    """Train and evaluate the cascade at several depths; report recall deltas.

    The first entry of ``stage_counts`` is the comparison baseline for the
    percentage column (a single-entry list reports 0% change).
    """
    if not stage_counts:
        raise ValueError("ablate_num_memories: need at least one stage count")
    if train_ds is None or val_ds is None:
        gen_train, gen_val = default_datasets(cfg)
        train_ds = train_ds or gen_train
        val_ds = val_ds or gen_val
    rows = []
    for c in stage_counts:
        cfg_c = dataclasses.replace(cfg, model="cmntm", cascade=cfg.cascade.with_stages(int(c)))
        result = train(cfg_c, train_ds=train_ds, val_ds=val_ds, log=log)
        report = evaluate_model(result.model, val_ds, cfg.eval_batch_size, cfg.seed)
        rows.append({"C": int(c), "r5": report["r5"], "r8": report["r8"],
                     "mean_r5_r8": report["mean_r5_r8"]})
    base = rows[0]["mean_r5_r8"]
    for row in rows:
        row["pct_change_vs_first"] = (0.0 if base == 0
                                      else (row["mean_r5_r8"] - base) / base * 100.0)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablate_memories.csv"), "w", encoding="utf-8") as fh:
            fh.write("C,r5,r8,mean_r5_r8,pct_change_vs_first\n")
            for row in rows:
                fh.write(f"{row['C']},{row['r5']:.6f},{row['r8']:.6f},"
                         f"{row['mean_r5_r8']:.6f},{row['pct_change_vs_first']:.2f}\n")
    return rows


TURN_IMPORTANCE_PROTOCOL = (
    "history length k feeds the final k past turns as real input; the skipped "
    "prefix is granted via ground-truth state substitution: the model enters at "
    "turn N-k with the reference portion of that turn's query replaced by the "
    "turn-(N-k-1) ground-truth target feature")


def _suffix_queries(dataset: SyntheticDataset, entry_turn: int, block_len: int) -> np.ndarray:
    """Queries from ``entry_turn`` on, rebuilt around the previous turn's
    ground-truth target feature.

    Granting the history means the remaining turns refine the ground-truth
    feature instead of the original reference: each suffix turn keeps only its
    own revealed block from the recorded query.
    """
    out = []
    for txn in dataset.transactions:
        qs = txn.queries[entry_turn:].copy()
        if entry_turn > 0:
            if txn.meta is None:
                raise DegenerateInputError(
                    "turn_importance: ground-truth substitution needs generation metadata")
            granted = dataset.db.feature_of(int(txn.target_ids[entry_turn - 1]))
            for t in range(entry_turn, txn.queries.shape[0]):
                block = txn.meta.turns[t].block
                sl = slice(block * block_len, (block + 1) * block_len)
                rebuilt = granted.copy()
                rebuilt[sl] = txn.queries[t][sl]
                qs[t - entry_turn] = rebuilt
        out.append(qs)
    return np.stack(out)


def turn_importance(model, baseline_model, dataset: SyntheticDataset, block_len: int,
                    eval_batch_size: int = 256, seed: int = 0,
                    out_dir: str | None = None) -> dict:
    """Recall as a function of how many past turns the model actually sees.

    k = N-1 feeds the full transaction (identical to standard evaluation);
    k = 0 enters at the final turn with a ground-truth-substituted query.
    Reports per-k recall for the memory model and the memory-less baseline,
    plus each model's spread (max - min over k).
    """
    n = dataset.max_turns
    rows = []
    spreads = {}
    for label, mdl in (("memory", model), ("memoryless", baseline_model)):
        values = []
        for k in range(n):
            entry_turn = n - 1 - k
            override = _suffix_queries(dataset, entry_turn, block_len)
            preds = predict_dataset(mdl, dataset, eval_batch_size, seed,
                                    queries_override=override)
            report = _recall_report(preds[:, -1], dataset)
            rows.append({"model": label, "history_turns": k,
                         "r5": report["r5"], "r8": report["r8"],
                         "mean_r5_r8": report["mean_r5_r8"]})
            values.append(report["mean_r5_r8"])
        spreads[label] = max(values) - min(values)
    summary = {"protocol": TURN_IMPORTANCE_PROTOCOL, "rows": rows, "spread": spreads}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "turn_importance.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def turn_order_experiment(model, dataset: SyntheticDataset, count: int = 500,
                          eval_batch_size: int = 256, seed: int = 0,
                          out_dir: str | None = None) -> dict:
    """Compare final-turn retrievals under original and permuted turn order.

    Reports the mean top-5 overlap (|intersection| / 5) and the target
    retention rate: of the transactions whose original-order top-5 contains
    the target, the fraction that still contain it after permutation.
    """
    txns = dataset.transactions[:count]
    subset = SyntheticDataset(dataset.feature_dim, dataset.max_turns, dataset.db,
                              list(txns), dataset.split)
    originals = predict_dataset(model, subset, eval_batch_size, seed)[:, -1]
    permuted_queries = []
    for i, txn in enumerate(txns):
        perm_rng = np.random.default_rng(np.random.SeedSequence([_ORDER_TAG, seed, i]))
        permuted_queries.append(txn.queries[perm_rng.permutation(txn.num_turns)])
    permuted = predict_dataset(model, subset, eval_batch_size, seed,
                               queries_override=np.stack(permuted_queries))[:, -1]
    overlaps = []
    kept = retained = 0
    for i, txn in enumerate(txns):
        top_orig = set(int(v) for v in _top_ids(originals[i], dataset.db, 5))
        top_perm = set(int(v) for v in _top_ids(permuted[i], dataset.db, 5))
        overlaps.append(len(top_orig & top_perm) / 5.0)
        target = int(txn.target_ids[-1])
        if target in top_orig:
            kept += 1
            if target in top_perm:
                retained += 1
    report = {"count": len(txns),
              "mean_top5_overlap": float(np.mean(overlaps)),
              "target_retention": (retained / kept) if kept else None}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "turn_order.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


BLOCK_MATCH_TOP_SHARE = 0.1


def memory_retention_experiment(model, dataset: SyntheticDataset, block_len: int,
                                eval_batch_size: int = 256, seed: int = 0,
                                out_dir: str | None = None) -> dict:
    """Does turn-1 information survive in later retrievals?

    A retrieved candidate "matches" turn 1 if it lies in the top 10% of the
    db ranked by similarity between its first revealed block and the values
    turn 1 actually revealed; chance level is therefore exactly that share.
    The stateful pass runs the transaction normally; the state-reset
    comparator re-initializes the model before every turn so only the current
    query can influence retrieval.
    """
    txns = dataset.transactions
    n = dataset.max_turns
    db = dataset.db
    match_sets = []
    for txn in txns:
        if txn.meta is None:
            raise DegenerateInputError("memory_retention: needs generation metadata")
        block = txn.meta.turns[0].block
        sl = slice(block * block_len, (block + 1) * block_len)
        revealed = txn.queries[0][sl]
        sub = db.features[:, sl]
        denom = np.maximum(np.linalg.norm(sub, axis=1) * max(np.linalg.norm(revealed), 1e-30), 1e-30)
        sims = sub @ revealed / denom
        top_l = max(1, round(BLOCK_MATCH_TOP_SHARE * len(db)))
        order = np.lexsort((db.ids, -sims))
        match_sets.append(set(int(v) for v in db.ids[order[:top_l]]))
    stateful_preds = predict_dataset(model, dataset, eval_batch_size, seed)
    reset_preds = np.empty_like(stateful_preds)
    for turn in range(n):
        single = predict_dataset(model, dataset, eval_batch_size, seed,
                                 queries_override=np.stack(
                                     [t.queries[turn:turn + 1] for t in txns]))
        reset_preds[:, turn] = single[:, 0]

    def rates(preds: np.ndarray) -> list[float]:
        out = []
        for turn in range(n):
            hits = [len(set(int(v) for v in _top_ids(preds[i, turn], db, 5)) & match_sets[i]) / 5.0
                    for i in range(len(txns))]
            out.append(float(np.mean(hits)))
        return out

    top_l = max(1, round(BLOCK_MATCH_TOP_SHARE * len(db)))
    report = {"count": len(txns),
              "chance_rate": top_l / len(db),
              "stateful": rates(stateful_preds),
              "state_reset": rates(reset_preds)}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "memory_retention.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report


def timing_experiment(cascade_configs: Sequence[CascadeConfig], task: TaskConfig,
                      txn_count: int = 100, warmup: int = 10, seed: int = 0,
                      checkpoint_path: str | None = None,
                      out_dir: str | None = None) -> list[dict]:
    """Median single-transaction inference time per architecture.

    Each configuration runs ``warmup`` unmeasured transactions, then at least
    ``txn_count`` measured ones on a monotonic clock. If a checkpoint is
    given, the matching configuration's row also reports its recall on the
    generated transactions.
    """
    if txn_count < 1:
        raise ValueError("timing_experiment: txn_count must be >= 1")
    dataset = gen_distractor(task, max(txn_count, 32), split="val")
    loaded = load_checkpoint(checkpoint_path) if checkpoint_path else None
    rows = []
    for cc in cascade_configs:
        if cc.feature_dim != task.feature_dim:
            raise ValueError("timing_experiment: cascade feature_dim must match the task")
        if loaded is not None and loaded.cfg.cascade == cc and loaded.cfg.model in ("cmntm", "vntm"):
            model = restore_model(loaded)
            recall = evaluate_model(model, dataset, seed=seed)["mean_r5_r8"]
        else:
            rng = np.random.default_rng(np.random.SeedSequence([_MODEL_TAG, seed]))
            model = CMNTM(cc, rng)
            recall = None
        model.set_training(False)
        txns = dataset.transactions
        times_ms = []
        for i in range(warmup + txn_count):
            txn = txns[i % len(txns)]
            state = model.initial_state(_rngs(_TIMING_TAG, seed, [i]))
            queries = txn.queries[np.newaxis]
            start = time.perf_counter()
            with no_grad():
                model.forward_transaction(queries, state)
            elapsed = (time.perf_counter() - start) * 1e3
            if i >= warmup:
                times_ms.append(elapsed)
        rows.append({"C": cc.num_stages, "P": cc.mem_locations, "M": cc.mem_width,
                     "mean_r5_r8": recall,
                     "ms_per_txn": float(statistics.median(times_ms))})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "timing.csv"), "w", encoding="utf-8") as fh:
            fh.write("C,P,M,mean_r5_r8,ms_per_txn\n")
            for row in rows:
                recall_text = "" if row["mean_r5_r8"] is None else f"{row['mean_r5_r8']:.6f}"
                fh.write(f"{row['C']},{row['P']},{row['M']},{recall_text},{row['ms_per_txn']:.6f}\n")
    return rows


def check_timing_monotone(rows: Sequence[dict], rel_tol: float = 0.05) -> None:
    """Verify median time is non-decreasing in stage count at fixed memory size.

    A small relative tolerance absorbs timer jitter; a genuine decrease
    beyond it raises ``TimingMonotonicityError``.
    """
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["P"], row["M"]), []).append(row)
    for (p, m), group in groups.items():
        group = sorted(group, key=lambda r: r["C"])
        for prev, cur in zip(group, group[1:]):
            floor = prev["ms_per_txn"] * (1.0 - rel_tol)
            if cur["ms_per_txn"] < floor:
                raise TimingMonotonicityError(
                    f"P={p}, M={m}: median time dropped from {prev['ms_per_txn']:.4f} ms "
                    f"(C={prev['C']}) to {cur['ms_per_txn']:.4f} ms (C={cur['C']})")
