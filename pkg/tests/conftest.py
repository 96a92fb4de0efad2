"""Shared fixtures and helpers for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from loadinfer.amigen import CustomerRecord, HOURS_PER_MONTH, PopulationSpec, generate_population
from loadinfer.feeder import Branch, FeederModel, Node, feeder18, FeederStructure


def truncate_record(rec: CustomerRecord, months: int) -> CustomerRecord:
    """First ``months`` normalized months of a record (for held-out splits)."""
    n = months * HOURS_PER_MONTH
    return CustomerRecord(
        id=rec.id,
        type=rec.type,
        timestamps=rec.timestamps[:n],
        hourly_kwh=rec.hourly_kwh[:n],
        true_class=rec.true_class,
    )


def two_node_feeder(r: float = 0.01, x: float = 0.01, base_kva: float = 1000.0) -> FeederModel:
    return FeederModel(
        nodes=(Node(id=1), Node(id=2)),
        branches=(Branch(from_node=1, to_node=2, r=r, x=x),),
        slack_node=1,
        base_kva=base_kva,
        base_kv=12.66,
    )


@pytest.fixture(scope="session")
def fixture18():
    return feeder18()


@pytest.fixture(scope="session")
def fixture18_structure(fixture18):
    return FeederStructure(fixture18)


@pytest.fixture(scope="session")
def small_population():
    """24 residential customers, 2 planted classes, 3 months, moderate noise."""
    spec = PopulationSpec(
        counts={"residential": 24},
        weekday_classes={"residential": 2},
        weekend_classes={"residential": 2},
        months=3,
        noise_sigma=0.10,
        id_prefix="small",
    )
    return spec, generate_population(spec, 2024)
