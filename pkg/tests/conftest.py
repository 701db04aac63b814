from pathlib import Path

import pytest

from declassify.vtables import ClassTable, load_vtables

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


def fixture_classes(stem):
    tables, _ = load_vtables(FIXTURES / f"{stem}.vt")
    return ClassTable.from_tables(tables)
