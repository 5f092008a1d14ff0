"""
Interaction-log handling for mscan_lab.

Reads click logs from CSV, builds dense vocabularies, keeps users active in
several scenarios, splits chronologically and turns every logged event into
a training example carrying the user's cross-scenario and current-scenario
click histories.
"""

import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError, MissingInputError

logger = logging.getLogger(__name__)

ID_COLUMNS = ('user_id', 'item_id', 'scenario_id', 'timestamp', 'click')
ENTITIES = ('user', 'item', 'scenario')
DEFAULT_SCHEMA = {name: name for name in ID_COLUMNS + ('interest',)}
DEFAULT_CAPS = (50, 20)


@dataclass(frozen=True)
class InteractionRecord:
    """One logged (user, item, scenario, timestamp, click) event."""

    user_id: int
    item_id: int
    scenario_id: int
    timestamp: int
    click: int
    interest: Optional[float] = None


@dataclass(frozen=True)
class BehaviorSequences:
    """
    Click histories attached to one example, oldest first.

    ``mixed_*`` is the cross-scenario history, ``current_*`` its restriction
    to the example's scenario.
    """

    mixed_items: Tuple[int, ...] = ()
    mixed_scenarios: Tuple[int, ...] = ()
    mixed_timestamps: Tuple[int, ...] = ()
    current_items: Tuple[int, ...] = ()
    current_timestamps: Tuple[int, ...] = ()

    @property
    def n_uh(self) -> int:
        return len(self.mixed_items)

    @property
    def n_us(self) -> int:
        return len(self.current_items)


@dataclass(frozen=True)
class Example:
    """A candidate (user, item, scenario) event with its label and histories."""

    user_id: int
    item_id: int
    scenario_id: int
    timestamp: int
    label: int
    sequences: BehaviorSequences
    ground_truth_interest: Optional[float] = None


class Vocabulary:
    """Maps raw ids to dense ids in order of first appearance."""

    def __init__(self, raw_ids: Iterable[int] = ()):
        self.raw_to_dense: Dict[int, int] = {}
        for raw in raw_ids:
            self.raw_to_dense.setdefault(int(raw), len(self.raw_to_dense))

    @classmethod
    def from_series(cls, values: pd.Series) -> 'Vocabulary':
        return cls(pd.unique(values))

    def __len__(self) -> int:
        return len(self.raw_to_dense)

    def encode(self, values: pd.Series) -> pd.Series:
        return values.map(self.raw_to_dense).astype(np.int64)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'raw_id': list(self.raw_to_dense.keys()),
            'dense_id': list(self.raw_to_dense.values()),
        })

    def save(self, path: Union[str, Path]):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"vocabulary file not found: {path}", path=str(path))
        frame = pd.read_csv(path).sort_values('dense_id', kind='stable')
        return cls(frame['raw_id'].tolist())


def _parse_int_column(df: pd.DataFrame, column: str, canonical: str) -> pd.Series:
    text = df[column].astype(str).str.strip()
    bad = ~text.str.fullmatch(r'-?\d+')
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"column {canonical}: cannot parse {text.iloc[row]!r} as an integer",
                        line=row + 2)
    return text.astype(np.int64)


def _parse_interest_column(df: pd.DataFrame, column: str) -> pd.Series:
    values = []
    for row, text in enumerate(df[column].astype(str)):
        try:
            value = float(text)
        except ValueError:
            raise DataError(f"column interest: cannot parse {text!r} as a real", line=row + 2)
        if not math.isfinite(value):
            raise DataError(f"column interest: non-finite value {text!r}", line=row + 2)
        values.append(value)
    return pd.Series(values, index=df.index, dtype=np.float64)


def densify(frame: pd.DataFrame) -> Tuple[pd.DataFrame, Dict[str, Vocabulary]]:
    """Re-index user/item/scenario ids densely; returns the new frame and vocabularies."""
    out = frame.copy()
    vocabs = {}
    for entity in ENTITIES:
        column = f"{entity}_id"
        vocab = Vocabulary.from_series(out[column])
        out[column] = vocab.encode(out[column])
        vocabs[entity] = vocab
    return out, vocabs


def records_from_frame(frame: pd.DataFrame) -> List[InteractionRecord]:
    interest = frame['interest'].tolist() if 'interest' in frame.columns else [None] * len(frame)
    return [
        InteractionRecord(int(u), int(i), int(s), int(t), int(c), None if m is None else float(m))
        for u, i, s, t, c, m in zip(frame['user_id'], frame['item_id'], frame['scenario_id'],
                                     frame['timestamp'], frame['click'], interest)
    ]


def records_to_frame(records: Sequence[InteractionRecord]) -> pd.DataFrame:
    frame = pd.DataFrame({
        'user_id': [r.user_id for r in records],
        'item_id': [r.item_id for r in records],
        'scenario_id': [r.scenario_id for r in records],
        'timestamp': [r.timestamp for r in records],
        'click': [r.click for r in records],
    }, dtype=np.int64)
    if records and all(r.interest is not None for r in records):
        frame['interest'] = [r.interest for r in records]
    return frame


def save_vocabularies(vocabs: Dict[str, Vocabulary], vocab_dir: Union[str, Path]):
    vocab_dir = Path(vocab_dir)
    vocab_dir.mkdir(parents=True, exist_ok=True)
    for entity, vocab in vocabs.items():
        vocab.save(vocab_dir / f"{entity}s.csv")


def read_log(path: Union[str, Path], schema: Optional[Dict[str, str]] = None
             ) -> Tuple[pd.DataFrame, Dict[str, Vocabulary]]:
    """Parse an interaction log into a dense-id frame plus its vocabularies; writes nothing."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"interaction log not found: {path}", path=str(path))
    columns = {**DEFAULT_SCHEMA, **(schema or {})}

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty; a header row is required")
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: {e}")

    missing = [name for name in ID_COLUMNS if columns[name] not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")

    frame = pd.DataFrame(index=df.index)
    for name in ID_COLUMNS:
        frame[name] = _parse_int_column(df, columns[name], name)
    bad_click = ~frame['click'].isin([0, 1])
    if bad_click.any():
        row = int(np.flatnonzero(bad_click.to_numpy())[0])
        raise DataError(f"click must be 0 or 1, got {frame['click'].iloc[row]}", line=row + 2)
    if columns['interest'] in df.columns:
        frame['interest'] = _parse_interest_column(df, columns['interest'])

    frame, vocabs = densify(frame)
    logger.info("Ingested %d records from %s (%d users, %d items, %d scenarios)",
                len(frame), path, len(vocabs['user']), len(vocabs['item']), len(vocabs['scenario']))
    return frame, vocabs


def ingest_csv(path: Union[str, Path], schema: Optional[Dict[str, str]] = None,
               vocab_dir: Optional[Union[str, Path]] = None) -> List[InteractionRecord]:
    """
    Parse an interaction log into records with dense ids.

    Args:
        path: CSV file with a header row
        schema: Mapping from canonical column name to the file's column name
        vocab_dir: Where the raw->dense id mappings are written
                   (default: ``<stem>_vocab/`` next to the file)

    Returns:
        Records in file order
    """
    path = Path(path)
    frame, vocabs = read_log(path, schema)
    save_vocabularies(vocabs, path.parent / f"{path.stem}_vocab" if vocab_dir is None else vocab_dir)
    return records_from_frame(frame)


def filter_multi_scenario_users(records: Sequence[InteractionRecord]) -> List[InteractionRecord]:
    """Keep only users with interactions in at least two distinct scenarios."""
    if not records:
        raise DataError("no records to filter")
    scenarios = defaultdict(set)
    for r in records:
        scenarios[r.user_id].add(r.scenario_id)
    keep = {user for user, seen in scenarios.items() if len(seen) >= 2}
    kept = [r for r in records if r.user_id in keep]
    if not kept:
        raise DataError("no user has interactions in two or more scenarios")
    logger.info("Kept %d of %d users (%d of %d records) active in 2+ scenarios",
                len(keep), len(scenarios), len(kept), len(records))
    return kept


def chronological_split(records: Sequence[InteractionRecord], test_fraction: float = 0.4
                        ) -> Tuple[List[InteractionRecord], List[InteractionRecord]]:
    """Sort by timestamp (stable) and put the most recent ceil(fraction * n) records in test."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}",
                          key='data.test_fraction')
    if not records:
        raise DataError("cannot split an empty record list")
    ordered = sorted(records, key=lambda r: r.timestamp)
    n_test = math.ceil(Fraction(str(test_fraction)) * len(ordered))
    cut = len(ordered) - n_test
    return ordered[:cut], ordered[cut:]


def build_sequences(records: Sequence[InteractionRecord],
                    caps: Tuple[int, int] = DEFAULT_CAPS) -> List[Example]:
    """
    Attach click histories to every record.

    The mixed history is the user's most recent ``caps[0]`` clicks strictly
    before the record's timestamp, across all scenarios. The current history
    is the part of the mixed history in the record's scenario, capped at the
    ``caps[1]`` most recent.

    Returns:
        One Example per record, in input order
    """
    cap_h, cap_s = caps
    if cap_h <= 0 or cap_s <= 0:
        raise ConfigError(f"history caps must be positive, got {caps}", key='model.history_cap')

    order = sorted(range(len(records)), key=lambda k: records[k].timestamp)
    history: Dict[int, deque] = defaultdict(lambda: deque(maxlen=cap_h))
    pending: Dict[int, list] = defaultdict(list)
    examples: List[Optional[Example]] = [None] * len(records)

    for k in order:
        r = records[k]
        queued = pending[r.user_id]
        if queued and queued[0][2] < r.timestamp:
            history[r.user_id].extend(queued)
            queued.clear()

        mixed = history[r.user_id]
        current = [(item, ts) for item, scen, ts in mixed if scen == r.scenario_id][-cap_s:]
        seqs = BehaviorSequences(
            mixed_items=tuple(item for item, _, _ in mixed),
            mixed_scenarios=tuple(scen for _, scen, _ in mixed),
            mixed_timestamps=tuple(ts for _, _, ts in mixed),
            current_items=tuple(item for item, _ in current),
            current_timestamps=tuple(ts for _, ts in current),
        )
        examples[k] = Example(
            user_id=r.user_id,
            item_id=r.item_id,
            scenario_id=r.scenario_id,
            timestamp=r.timestamp,
            label=r.click,
            sequences=seqs,
            ground_truth_interest=r.interest,
        )
        if r.click:
            queued.append((r.item_id, r.scenario_id, r.timestamp))

    return examples


def prepare_examples(records: Sequence[InteractionRecord], caps: Tuple[int, int] = DEFAULT_CAPS,
                     test_fraction: float = 0.4, filter_users: bool = True
                     ) -> Tuple[List[Example], List[Example]]:
    """Filter, split chronologically and build sequences over the whole log."""
    if filter_users:
        records = filter_multi_scenario_users(records)
    train_records, test_records = chronological_split(records, test_fraction)
    examples = build_sequences(train_records + test_records, caps)
    train, test = examples[:len(train_records)], examples[len(train_records):]
    logger.info("Prepared %d train / %d test examples", len(train), len(test))
    return train, test


def vocab_sizes(*collections: Sequence[Union[Example, InteractionRecord]]) -> Tuple[int, int, int]:
    """(M, N, P) large enough for every id in the given examples or records."""
    users = items = scenarios = 0
    for rows in collections:
        for row in rows:
            users = max(users, row.user_id + 1)
            items = max(items, row.item_id + 1)
            scenarios = max(scenarios, row.scenario_id + 1)
            if isinstance(row, Example) and row.sequences.n_uh:
                items = max(items, max(row.sequences.mixed_items) + 1)
    return users, items, scenarios


@dataclass
class ExampleBatch:
    """
    Padded index arrays for a list of examples.

    Valid history entries are left-aligned (oldest first); masks flag them.
    """

    users: np.ndarray
    items: np.ndarray
    scenarios: np.ndarray
    labels: np.ndarray
    interest: np.ndarray
    mixed_items: np.ndarray
    mixed_mask: np.ndarray
    current_items: np.ndarray
    current_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    @classmethod
    def from_examples(cls, examples: Sequence[Example], caps: Tuple[int, int]) -> 'ExampleBatch':
        cap_h, cap_s = caps
        n = len(examples)
        mixed_items = np.zeros((n, cap_h), dtype=np.int64)
        mixed_mask = np.zeros((n, cap_h), dtype=bool)
        current_items = np.zeros((n, cap_s), dtype=np.int64)
        current_mask = np.zeros((n, cap_s), dtype=bool)
        for row, ex in enumerate(examples):
            mixed = ex.sequences.mixed_items[-cap_h:]
            current = ex.sequences.current_items[-cap_s:]
            mixed_items[row, :len(mixed)] = mixed
            mixed_mask[row, :len(mixed)] = True
            current_items[row, :len(current)] = current
            current_mask[row, :len(current)] = True
        return cls(
            users=np.array([e.user_id for e in examples], dtype=np.int64),
            items=np.array([e.item_id for e in examples], dtype=np.int64),
            scenarios=np.array([e.scenario_id for e in examples], dtype=np.int64),
            labels=np.array([e.label for e in examples], dtype=np.float64),
            interest=np.array([np.nan if e.ground_truth_interest is None else e.ground_truth_interest
                               for e in examples], dtype=np.float64),
            mixed_items=mixed_items,
            mixed_mask=mixed_mask,
            current_items=current_items,
            current_mask=current_mask,
        )

    def subset(self, index: np.ndarray) -> 'ExampleBatch':
        return ExampleBatch(**{name: getattr(self, name)[index] for name in self.__dataclass_fields__})

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None):
        """Yield consecutive sub-batches, optionally in a given order; the last may be partial."""
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            yield self.subset(order[start:start + batch_size])


def export_csv(rows: Sequence[Union[Example, InteractionRecord]], path: Union[str, Path]):
    """Write records or examples in the ingestion schema (plus interest when known)."""
    records = [
        InteractionRecord(r.user_id, r.item_id, r.scenario_id, r.timestamp, r.label,
                          r.ground_truth_interest) if isinstance(r, Example) else r
        for r in rows
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, index=False)
    logger.info("Wrote %d rows to %s", len(records), path)


def dataset_summary(examples: Sequence[Example]) -> pd.DataFrame:
    """Per-scenario example counts, clicks, CTR and mean history lengths."""
    frame = pd.DataFrame({
        'scenario_id': [e.scenario_id for e in examples],
        'click': [e.label for e in examples],
        'n_uh': [e.sequences.n_uh for e in examples],
        'n_us': [e.sequences.n_us for e in examples],
    })
    summary = frame.groupby('scenario_id').agg(
        examples=('click', 'size'),
        clicks=('click', 'sum'),
        ctr=('click', 'mean'),
        mean_n_uh=('n_uh', 'mean'),
        mean_n_us=('n_us', 'mean'),
    )
    return summary
