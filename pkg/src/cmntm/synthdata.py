"""Synthetic multi-turn retrieval tasks.

Each transaction starts from a reference item and progressively reveals
disjoint coordinate blocks of a hidden target item, one block per turn. A
turn's query is the reference feature with that turn's block swapped for the
target's values (plus optional noise); the ground-truth item for turn n is the
database item nearest (by cosine) to the clean composite of everything
revealed through turn n. Memory is therefore required: no single turn
identifies the final target on its own.

Datasets serialize to JSON lines: one header object, one object per database
item, then one object per transaction. Floats are written as exact decimal
representations of their single-precision values, so files round-trip
losslessly and are byte-identical for a given seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError, DegenerateInputError
from .retrieval import CandidateDB

FILE_VERSION = 1

# Seed-derivation tags keep the independent random streams apart.
_DB_TAG = 101
_TXN_TAG = 102
_SPLIT_TAGS = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class TaskConfig:
    """Generator parameters for the block-reveal task family."""

    feature_dim: int = 32
    blocks: int = 4          # coordinate blocks the feature space is cut into
    max_turns: int = 4       # turns per transaction (each reveals one block)
    db_size: int = 256
    noise_std: float = 0.05  # noise added to revealed block values
    distractor_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blocks < self.max_turns:
            raise ValueError("TaskConfig: blocks must be >= max_turns so turns reveal disjoint blocks")
        if self.feature_dim % self.blocks != 0:
            raise ValueError("TaskConfig: feature_dim must be divisible by blocks")
        if self.db_size < 8:
            raise ValueError("TaskConfig: db_size must be >= 8")
        if self.max_turns < 1:
            raise ValueError("TaskConfig: max_turns must be >= 1")
        if self.noise_std < 0:
            raise ValueError("TaskConfig: noise_std must be >= 0")
        if not (0.0 <= self.distractor_prob <= 1.0):
            raise ValueError("TaskConfig: distractor_prob must be in [0, 1]")

    @property
    def block_len(self) -> int:
        return self.feature_dim // self.blocks

    def block_slice(self, block: int) -> slice:
        return slice(block * self.block_len, (block + 1) * self.block_len)


@dataclass
class TurnMeta:
    block: int        # which coordinate block this turn addressed
    distractor: bool  # True if the query was replaced by pure noise


@dataclass
class TransactionMeta:
    """Generation-time facts needed by oracle baselines and probe experiments."""

    reference_id: int
    turns: list[TurnMeta]


@dataclass
class Transaction:
    """One padded multi-turn retrieval episode."""

    queries: np.ndarray          # (N, D) float32 query feature per turn
    target_ids: np.ndarray       # (N,) int64 per-turn ground-truth item id
    target_features: np.ndarray  # (N, D) float32 features of the ground-truth items
    original_len: int            # turns before padding
    meta: TransactionMeta | None = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float32)
        self.target_ids = np.asarray(self.target_ids, dtype=np.int64)
        self.target_features = np.asarray(self.target_features, dtype=np.float32)
        n = self.queries.shape[0]
        if self.target_ids.shape != (n,) or self.target_features.shape != self.queries.shape:
            raise DegenerateInputError("Transaction: inconsistent turn counts")
        if not (1 <= self.original_len <= n):
            raise DegenerateInputError(
                f"Transaction: original_len {self.original_len} out of range for {n} turns")

    @property
    def num_turns(self) -> int:
        return self.queries.shape[0]


@dataclass
class SyntheticDataset:
    feature_dim: int
    max_turns: int
    db: CandidateDB
    transactions: list[Transaction]
    split: str = "train"


def pad_transaction(txn: Transaction, max_turns: int) -> Transaction:
    """Pad to ``max_turns`` by repeating the last real turn; keeps original_len."""
    if txn.num_turns > max_turns:
        raise DegenerateInputError(
            f"pad_transaction: transaction has {txn.num_turns} turns, max_turns is {max_turns}")
    extra = max_turns - txn.num_turns
    if extra == 0:
        return txn
    queries = np.concatenate([txn.queries, np.repeat(txn.queries[-1:], extra, axis=0)])
    target_ids = np.concatenate([txn.target_ids, np.repeat(txn.target_ids[-1:], extra)])
    target_features = np.concatenate(
        [txn.target_features, np.repeat(txn.target_features[-1:], extra, axis=0)])
    meta = None
    if txn.meta is not None:
        turns = txn.meta.turns + [TurnMeta(txn.meta.turns[-1].block, txn.meta.turns[-1].distractor)] * extra
        meta = TransactionMeta(txn.meta.reference_id, turns)
    return Transaction(queries, target_ids, target_features, txn.original_len, meta)


def truncate_transaction(txn: Transaction) -> Transaction:
    """Drop padded turns, restoring the transaction to its original length."""
    n = txn.original_len
    meta = None
    if txn.meta is not None:
        meta = TransactionMeta(txn.meta.reference_id, txn.meta.turns[:n])
    return Transaction(txn.queries[:n].copy(), txn.target_ids[:n].copy(),
                       txn.target_features[:n].copy(), n, meta)


def make_db(config: TaskConfig) -> CandidateDB:
    """I.i.d. unit-norm Gaussian candidate features, shared across splits."""
    rng = np.random.default_rng(np.random.SeedSequence([_DB_TAG, config.seed]))
    feats = rng.normal(size=(config.db_size, config.feature_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return CandidateDB(np.arange(config.db_size), feats.astype(np.float32))


def _nearest_id(db: CandidateDB, vector: np.ndarray) -> int:
    """Id of the candidate with the highest cosine similarity to ``vector``."""
    norms = np.linalg.norm(db.features, axis=1) * max(np.linalg.norm(vector), 1e-30)
    return int(db.ids[np.argmax(db.features @ vector / norms)])


def _generate(config: TaskConfig, count: int, split: str,
              distractor_prob: float) -> SyntheticDataset:
    if split not in _SPLIT_TAGS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_TAGS)}")
    if count < 1:
        raise ValueError("dataset must contain at least one transaction")
    db = make_db(config)
    split_tag = _SPLIT_TAGS[split]
    transactions = []
    for index in range(count):
        # per-transaction generator: generation order never affects content
        rng = np.random.default_rng(
            np.random.SeedSequence([_TXN_TAG, config.seed, split_tag, index]))
        ref, tgt = (int(v) for v in rng.choice(config.db_size, size=2, replace=False))
        block_order = [int(b) for b in rng.permutation(config.blocks)[:config.max_turns]]
        composite = db.feature_of(ref).astype(np.float64).copy()
        queries, target_ids, metas = [], [], []
        for block in block_order:
            is_distractor = rng.random() < distractor_prob
            if is_distractor:
                noise = rng.normal(size=config.feature_dim)
                query = noise / np.linalg.norm(noise)
            else:
                sl = config.block_slice(block)
                query = db.feature_of(ref).astype(np.float64).copy()
                query[sl] = db.feature_of(tgt)[sl] + rng.normal(0.0, config.noise_std,
                                                                size=config.block_len)
                composite[sl] = db.feature_of(tgt)[sl]
            queries.append(query.astype(np.float32))
            target_ids.append(_nearest_id(db, composite))
            metas.append(TurnMeta(block=block, distractor=is_distractor))
        target_ids = np.asarray(target_ids, dtype=np.int64)
        txn = Transaction(
            queries=np.stack(queries),
            target_ids=target_ids,
            target_features=np.stack([db.feature_of(i) for i in target_ids]),
            original_len=config.max_turns,
            meta=TransactionMeta(reference_id=ref, turns=metas),
        )
        transactions.append(txn)
    return SyntheticDataset(config.feature_dim, config.max_turns, db, transactions, split)


def gen_block_reveal(config: TaskConfig, count: int, split: str = "train") -> SyntheticDataset:
    """Progressive block-reveal transactions with no distractor turns."""
    return _generate(config, count, split, distractor_prob=0.0)


def gen_distractor(config: TaskConfig, count: int, split: str = "train") -> SyntheticDataset:
    """Block-reveal transactions where turns become pure noise with
    probability ``config.distractor_prob``; ground truth ignores such turns."""
    return _generate(config, count, split, distractor_prob=config.distractor_prob)


def oracle_features(txn: Transaction, db: CandidateDB,
                    block_len: int) -> np.ndarray:
    """Per-turn composites a construction-aware oracle would retrieve with.

    Starting from the reference feature, each non-distractor turn's revealed
    block values (as stored in the query, noise included) overwrite the
    composite. Requires generation metadata.
    """
    if txn.meta is None:
        raise DegenerateInputError("oracle_features: transaction has no generation metadata")
    composite = db.feature_of(txn.meta.reference_id).astype(np.float64).copy()
    out = np.empty_like(txn.queries, dtype=np.float64)
    for n, turn_meta in enumerate(txn.meta.turns):
        if not turn_meta.distractor:
            sl = slice(turn_meta.block * block_len, (turn_meta.block + 1) * block_len)
            composite[sl] = txn.queries[n][sl]
        out[n] = composite
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# serialization


def _float_list(arr: np.ndarray) -> list[float]:
    # float32 -> python float is exact, and json round-trips doubles exactly,
    # so values survive save/load bit-for-bit
    return [float(v) for v in np.asarray(arr, dtype=np.float32)]


def save_dataset(dataset: SyntheticDataset, path: str) -> None:
    """Write JSON lines: header, db items, transactions (deterministic bytes)."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"version": FILE_VERSION, "D": dataset.feature_dim,
                  "N_max": dataset.max_turns, "db_size": len(dataset.db),
                  "split": dataset.split}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i in range(len(dataset.db)):
            item = {"id": int(dataset.db.ids[i]), "feature": _float_list(dataset.db.features[i])}
            fh.write(json.dumps(item, separators=(",", ":")) + "\n")
        for txn in dataset.transactions:
            obj = {
                "original_len": txn.original_len,
                "turns": [{"qry": _float_list(txn.queries[n]),
                           "target_id": int(txn.target_ids[n])}
                          for n in range(txn.num_turns)],
            }
            if txn.meta is not None:
                obj["meta"] = {"ref": txn.meta.reference_id,
                               "turns": [{"block": t.block, "distractor": t.distractor}
                                         for t in txn.meta.turns]}
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _parse_line(path: str, line_no: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(path, line_no, f"invalid JSON: {e.msg}") from None
    if not isinstance(obj, dict):
        raise DatasetFormatError(path, line_no, "expected a JSON object")
    return obj


def _require(obj: dict, key: str, path: str, line_no: int):
    if key not in obj:
        raise DatasetFormatError(path, line_no, f"missing key {key!r}")
    return obj[key]


def load_dataset(path: str) -> SyntheticDataset:
    """Parse a dataset file; malformed content raises with the line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(path, 1, "empty file")
    header = _parse_line(path, 1, lines[0])
    version = _require(header, "version", path, 1)
    if version != FILE_VERSION:
        raise DatasetFormatError(path, 1, f"unsupported version {version}")
    feature_dim = int(_require(header, "D", path, 1))
    max_turns = int(_require(header, "N_max", path, 1))
    db_size = int(_require(header, "db_size", path, 1))
    split = str(header.get("split", "train"))
    if len(lines) < 1 + db_size:
        raise DatasetFormatError(path, len(lines) + 1,
                                 f"unexpected end of file: header promises {db_size} db items")
    ids, feats = [], []
    for i in range(db_size):
        line_no = 2 + i
        obj = _parse_line(path, line_no, lines[1 + i])
        ids.append(int(_require(obj, "id", path, line_no)))
        feature = _require(obj, "feature", path, line_no)
        if not isinstance(feature, list) or len(feature) != feature_dim:
            raise DatasetFormatError(path, line_no, f"feature must be a list of {feature_dim} numbers")
        feats.append(np.asarray(feature, dtype=np.float32))
    db = CandidateDB(np.asarray(ids), np.stack(feats))
    transactions = []
    for j, line in enumerate(lines[1 + db_size:]):
        line_no = 2 + db_size + j
        obj = _parse_line(path, line_no, line)
        turns = _require(obj, "turns", path, line_no)
        original_len = int(_require(obj, "original_len", path, line_no))
        if not isinstance(turns, list) or not turns:
            raise DatasetFormatError(path, line_no, "turns must be a non-empty list")
        queries, target_ids = [], []
        for turn in turns:
            if not isinstance(turn, dict):
                raise DatasetFormatError(path, line_no, "each turn must be an object")
            qry = _require(turn, "qry", path, line_no)
            if not isinstance(qry, list) or len(qry) != feature_dim:
                raise DatasetFormatError(path, line_no, f"qry must be a list of {feature_dim} numbers")
            queries.append(np.asarray(qry, dtype=np.float32))
            target_ids.append(int(_require(turn, "target_id", path, line_no)))
        for t in target_ids:
            if t not in db._index:
                raise DatasetFormatError(path, line_no, f"target_id {t} not in the candidate db")
        meta = None
        if "meta" in obj:
            raw = obj["meta"]
            meta = TransactionMeta(
                reference_id=int(_require(raw, "ref", path, line_no)),
                turns=[TurnMeta(int(_require(t, "block", path, line_no)),
                                bool(_require(t, "distractor", path, line_no)))
                       for t in _require(raw, "turns", path, line_no)])
        try:
            txn = Transaction(
                queries=np.stack(queries),
                target_ids=np.asarray(target_ids, dtype=np.int64),
                target_features=np.stack([db.feature_of(t) for t in target_ids]),
                original_len=original_len,
                meta=meta,
            )
        except DegenerateInputError as e:
            raise DatasetFormatError(path, line_no, str(e)) from None
        transactions.append(txn)
    if not transactions:
        raise DatasetFormatError(path, len(lines) + 1, "file contains no transactions")
    return SyntheticDataset(feature_dim, max_turns, db, transactions, split)


def datasets_equal(a: SyntheticDataset, b: SyntheticDataset) -> bool:
    """Structural equality over everything that serialization preserves."""
    if (a.feature_dim, a.max_turns, a.split) != (b.feature_dim, b.max_turns, b.split):
        return False
    if not (np.array_equal(a.db.ids, b.db.ids) and np.array_equal(a.db.features, b.db.features)):
        return False
    if len(a.transactions) != len(b.transactions):
        return False
    for ta, tb in zip(a.transactions, b.transactions):
        if ta.original_len != tb.original_len:
            return False
        if not (np.array_equal(ta.queries, tb.queries)
                and np.array_equal(ta.target_ids, tb.target_ids)):
            return False
        ma, mb = ta.meta, tb.meta
        if (ma is None) != (mb is None):
            return False
        if ma is not None:
            if ma.reference_id != mb.reference_id or len(ma.turns) != len(mb.turns):
                return False
            for ua, ub in zip(ma.turns, mb.turns):
                if (ua.block, ua.distractor) != (ub.block, ub.distractor):
                    return False
    return True
