"""Synthetic tables for experiments and tests.

The housing-style generator mirrors the California Housing schema (same nine
columns, 20,640 rows) with realistic marginal shapes: skewed income, bimodal
coordinates from two metro clusters, and a house value that rises with income
and is capped at 5.  It is a stand-in with known structure, not the survey
data itself, so conditional trends can be asserted against the generator.
"""

from __future__ import annotations

import csv

import numpy as np

from .data import RawTable

HOUSING_COLUMNS = ["MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population",
                   "AveOccup", "Latitude", "Longitude", "MedHouseVal"]
HOUSING_ROWS = 20640
HOUSE_VALUE_CAP = 5.0


def make_housing_table(seed: int = 0, n_rows: int = HOUSING_ROWS) -> RawTable:
    rng = np.random.default_rng(seed)
    med_inc = np.clip(np.exp(rng.normal(1.15, 0.45, n_rows)), 0.5, 15.0)
    house_age = np.clip(rng.normal(28.0, 12.0, n_rows), 1.0, 52.0)
    ave_rooms = np.clip(3.6 + 0.45 * med_inc + rng.normal(0.0, 0.9, n_rows), 1.5, 15.0)
    ave_bedrms = np.clip(1.02 + 0.012 * (ave_rooms - 5.0) + rng.normal(0.0, 0.09, n_rows),
                         0.6, 2.5)
    population = np.clip(np.exp(rng.normal(7.0, 0.65, n_rows)), 30.0, 20000.0)
    ave_occup = np.clip(np.exp(rng.normal(1.05, 0.22, n_rows)), 1.0, 12.0)

    # Two metro clusters give the familiar bimodal coordinate marginals.
    south = rng.random(n_rows) < 0.55
    latitude = np.where(south, rng.normal(34.1, 0.75, n_rows),
                        rng.normal(37.8, 0.65, n_rows))
    longitude = np.where(south, rng.normal(-118.2, 0.85, n_rows),
                         rng.normal(-122.1, 0.60, n_rows))

    value = (0.55 + 0.42 * med_inc + 0.04 * (ave_rooms - 5.0)
             + rng.normal(0.0, 0.35, n_rows))
    med_house_val = np.clip(value, 0.15, HOUSE_VALUE_CAP)

    values = np.column_stack([med_inc, house_age, ave_rooms, ave_bedrms,
                              population, ave_occup, latitude, longitude,
                              med_house_val])
    return RawTable(list(HOUSING_COLUMNS), values)


def make_normal_table(n_rows: int = 10000, seed: int = 0) -> RawTable:
    """One standard-normal column; the marginal a sampler must reproduce."""
    rng = np.random.default_rng(seed)
    return RawTable(["x"], rng.standard_normal((n_rows, 1)))


def make_bimodal_table(n_rows: int = 8000, seed: int = 0,
                       center: float = 2.0, width: float = 0.25) -> RawTable:
    """A flag column and a target that is an equal two-mode mixture.

    The target is N(-center, width^2) or N(+center, width^2) with equal odds,
    independent of the flag, so any flag value conditions on the same
    bimodal density.
    """
    rng = np.random.default_rng(seed)
    flag = rng.choice([-1.0, 1.0], size=n_rows)
    sign = rng.choice([-1.0, 1.0], size=n_rows)
    target = sign * center + rng.normal(0.0, width, n_rows)
    return RawTable(["flag", "target"], np.column_stack([flag, target]))


def make_pair_table(n_rows: int = 6000, seed: int = 0,
                    noise: float = 0.1) -> RawTable:
    """Two tightly coupled columns: y = x + N(0, noise^2)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_rows)
    y = x + (rng.normal(0.0, noise, n_rows) if noise > 0 else 0.0)
    return RawTable(["x", "y"], np.column_stack([x, y]))


def make_independent_table(n_rows: int = 6000, seed: int = 0) -> RawTable:
    """Two independent standard-normal columns."""
    rng = np.random.default_rng(seed)
    return RawTable(["x", "y"], rng.standard_normal((n_rows, 2)))


def make_constant_table(n_rows: int = 512, value: float = 5.0) -> RawTable:
    """A single constant column; the easiest possible training target."""
    return RawTable(["c"], np.full((n_rows, 1), value))


def write_csv(table: RawTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.names)
        for row in table.values:
            writer.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])
