"""Tables, feature registry, standardization, and training-example sampling.

A row of a table becomes a token sequence: position 0 is a request token that
names the feature whose density we want, positions 1..L-1 hold (feature id,
standardized magnitude) pairs for whatever conditioning subset was chosen, and
the rest is padding.  Missing table entries are NaN and never tokenized.
"""

from __future__ import annotations

import csv
import difflib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_MISSING_MARKERS = ("", "NaN", "nan")

# Scale floor keeps constant columns standardizable (they map to exactly 0).
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureId:
    index: int
    name: str


@dataclass
class FeatureRegistry:
    """Ordered feature identities plus per-feature standardization constants.

    The padding id equals the registry size, so it can never collide with a
    real feature index.
    """

    features: list[FeatureId]
    means: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in registry")
        self.means = np.asarray(self.means, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if np.any(self.scales <= 0):
            raise DataError("standardization scales must be positive")

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def padding_id(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def id_of(self, name: str) -> int:
        for f in self.features:
            if f.name == name:
                return f.index
        # Suggestions are matched case-insensitively but shown as registered.
        lowered = {n.lower(): n for n in self.names}
        near = difflib.get_close_matches(name.lower(), list(lowered), n=3, cutoff=0.3)
        hint = f" (did you mean: {', '.join(lowered[n] for n in near)}?)" if near else ""
        raise DataError(f"unknown feature {name!r}{hint}")

    def name_of(self, index: int) -> str:
        if not 0 <= index < self.size:
            raise DataError(f"feature index {index} out of range")
        return self.features[index].name

    def standardize(self, index: int, value: float) -> float:
        return (value - self.means[index]) / self.scales[index]

    def destandardize(self, index: int, value) -> float | np.ndarray:
        return value * self.scales[index] + self.means[index]

    def standardize_matrix(self, matrix: np.ndarray) -> np.ndarray:
        """Z-score every column at once; NaN entries stay NaN."""
        return (matrix - self.means) / self.scales

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "means": [float(m) for m in self.means],
            "scales": [float(s) for s in self.scales],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureRegistry":
        features = [FeatureId(i, n) for i, n in enumerate(d["names"])]
        return cls(features, np.asarray(d["means"]), np.asarray(d["scales"]))


@dataclass
class RawTable:
    """Column names plus an N x F matrix with NaN marking absent entries."""

    names: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError("table shape does not match column names")
        present = self.values[~np.isnan(self.values)]
        if present.size and not np.isfinite(present).all():
            raise DataError("table contains non-finite present entries")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def observed_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def empty_rows(self) -> np.ndarray:
        """Indices of rows with no observed entry; kept in the table but
        skipped by the example sampler."""
        return np.flatnonzero(~self.observed_mask().any(axis=1))


def load_csv(path, missing_markers=DEFAULT_MISSING_MARKERS) -> RawTable:
    """Read a headed CSV into a RawTable.

    Cells matching a missing marker (or blank) become NaN.  Anything else must
    parse as a real number.
    """
    markers = set(missing_markers)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            rows = []
            for lineno, cells in enumerate(reader, start=2):
                if len(cells) != len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
                parsed = []
                for name, cell in zip(header, cells):
                    cell = cell.strip()
                    if cell in markers:
                        parsed.append(np.nan)
                        continue
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: column {name!r}: cannot parse {cell!r}") from None
                    if np.isnan(v):
                        parsed.append(np.nan)
                    elif not np.isfinite(v):
                        raise DataError(f"{path}:{lineno}: column {name!r}: non-finite value {cell!r}")
                    else:
                        parsed.append(v)
                rows.append(parsed)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return RawTable(header, np.asarray(rows, dtype=np.float64))


def fit_standardization(table: RawTable) -> FeatureRegistry:
    """Per-feature mean and population standard deviation over present entries."""
    means = np.empty(table.n_features)
    scales = np.empty(table.n_features)
    for j, name in enumerate(table.names):
        col = table.values[:, j]
        present = col[~np.isnan(col)]
        if present.size < 2:
            raise ConfigError(f"feature {name!r} has {present.size} present values, need at least 2")
        means[j] = present.mean()
        scales[j] = max(present.std(), SCALE_FLOOR)
    features = [FeatureId(i, n) for i, n in enumerate(table.names)]
    return FeatureRegistry(features, means, scales)


@dataclass
class TokenizedRow:
    """One padded token sequence ready for the encoder.

    ``mask`` is true exactly at non-padding positions; position 0 (the request
    token) is always true.  ``target`` is (feature index, standardized value)
    during training and None for inference sequences.
    """

    token_ids: np.ndarray
    magnitudes: np.ndarray
    mask: np.ndarray
    target: tuple[int, float] | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not (self.token_ids.shape == self.magnitudes.shape == self.mask.shape):
            raise DataError("tokenized row arrays disagree in length")
        if not self.mask[0]:
            raise DataError("request position must be unmasked")

    @property
    def length(self) -> int:
        return self.token_ids.shape[0]


def sample_training_example(row: np.ndarray, registry: FeatureRegistry,
                            rng: np.random.Generator, context_length: int) -> TokenizedRow | None:
    """Draw one (conditioning subset, target) example from a raw row.

    The target is uniform over the row's observed features.  The conditioning
    subset is an independently drawn uniform-size uniform subset of the same
    observed features, so the target itself may appear among the inputs.
    Returns None for rows with nothing observed.
    """
    if context_length < 2:
        raise ConfigError("context length must be at least 2")
    row = np.asarray(row, dtype=np.float64)
    observed = np.flatnonzero(~np.isnan(row))
    if observed.size == 0:
        return None
    target_id = int(rng.choice(observed))
    cap = min(context_length - 1, observed.size)
    s = int(rng.integers(0, cap + 1))
    subset = rng.permutation(observed)[:s]

    token_ids = np.full(context_length, registry.padding_id, dtype=np.int64)
    magnitudes = np.zeros(context_length, dtype=np.float64)
    token_ids[0] = target_id
    for k, j in enumerate(subset, start=1):
        token_ids[k] = j
        magnitudes[k] = registry.standardize(j, row[j])
    mask = token_ids != registry.padding_id
    mask[0] = True
    target_value = registry.standardize(target_id, row[target_id])
    return TokenizedRow(token_ids, magnitudes, mask, (target_id, target_value))


def sample_training_batch(std_values: np.ndarray, observed: np.ndarray,
                          padding_id: int, rng: np.random.Generator,
                          context_length: int,
                          exclude_target: bool = False) -> dict[str, np.ndarray]:
    """Vectorized batch form of sample_training_example.

    ``std_values`` is a pre-standardized (B, F) slice with NaN still marking
    absent entries, ``observed`` its boolean presence mask.  Every row must
    have at least one observed feature.  Returns stacked arrays keyed
    token_ids, magnitudes, mask, target_ids, target_values.

    The draw is distribution-identical to the per-row operation: targets
    uniform over observed features, subset sizes uniform over 0..cap, subsets
    uniform given their size, all independent of the target choice.  With
    ``exclude_target`` the target's own value never enters the conditioning
    subset; calibration uses that so every trial is a genuine prediction.
    """
    B, F = std_values.shape
    L = context_length
    n_obs = observed.sum(axis=1)
    if np.any(n_obs == 0):
        raise DataError("batch contains rows with no observed features")

    # Uniform target among observed: argmax of iid keys restricted to observed.
    target_keys = np.where(observed, rng.random((B, F)), -1.0)
    target_ids = target_keys.argmax(axis=1)

    # Random permutation of each row's observed features via sorted iid keys;
    # unobserved features sink to the back.
    subset_keys = np.where(observed, rng.random((B, F)), 2.0)
    candidates = n_obs
    if exclude_target:
        subset_keys[np.arange(B), target_ids] = 2.0
        candidates = n_obs - 1
    order = subset_keys.argsort(axis=1, kind="stable")

    cap = np.minimum(L - 1, candidates)
    sizes = np.floor(rng.random(B) * (cap + 1)).astype(np.int64)

    # Conditions occupy at most min(L - 1, F) slots; the rest stay padding.
    width = min(L - 1, F)
    cand = order[:, :width]
    keep = np.arange(width)[None, :] < sizes[:, None]

    token_ids = np.full((B, L), padding_id, dtype=np.int64)
    magnitudes = np.zeros((B, L), dtype=np.float64)
    token_ids[:, 0] = target_ids
    token_ids[:, 1:1 + width] = np.where(keep, cand, padding_id)
    cand_vals = np.take_along_axis(std_values, cand, axis=1)
    magnitudes[:, 1:1 + width] = np.where(keep, cand_vals, 0.0)
    mask = token_ids != padding_id
    mask[:, 0] = True
    target_values = std_values[np.arange(B), target_ids]
    return {
        "token_ids": token_ids,
        "magnitudes": magnitudes,
        "mask": mask,
        "target_ids": target_ids,
        "target_values": target_values,
    }


def build_inference_sequence(conditions, request, registry: FeatureRegistry,
                             context_length: int | None = None) -> TokenizedRow:
    """Deterministic query sequence: request token, then the given conditions.

    ``conditions`` is a list of (feature name or index, raw value) pairs,
    kept in order; duplicates are accepted.  ``context_length`` defaults to
    the tightest fit and may exceed the training length.
    """
    request_id = _resolve(request, registry)
    resolved = [(_resolve(f, registry), float(v)) for f, v in conditions]
    needed = 1 + len(resolved)
    if context_length is None:
        context_length = needed
    if context_length < needed:
        raise DataError(f"context length {context_length} cannot hold {len(resolved)} conditions")

    token_ids = np.full(context_length, registry.padding_id, dtype=np.int64)
    magnitudes = np.zeros(context_length, dtype=np.float64)
    token_ids[0] = request_id
    for k, (j, v) in enumerate(resolved, start=1):
        token_ids[k] = j
        magnitudes[k] = registry.standardize(j, v)
    mask = token_ids != registry.padding_id
    mask[0] = True
    return TokenizedRow(token_ids, magnitudes, mask, None)


def _resolve(feature, registry: FeatureRegistry) -> int:
    if isinstance(feature, FeatureId):
        feature = feature.name
    if isinstance(feature, str):
        return registry.id_of(feature)
    index = int(feature)
    if not 0 <= index < registry.size:
        raise DataError(f"feature index {index} out of range")
    return index


def split_rows(n_rows: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/holdout row split."""
    if not 0 < holdout_fraction < 1:
        raise ConfigError("holdout fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_rows)
    n_hold = max(1, int(round(n_rows * holdout_fraction)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])
