"""Acceptance battery: one printed pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines, or
``maspolab verify`` for the same battery outside pytest.
"""

import pytest

from maspolab.checks import ALL_CHECKS


@pytest.mark.parametrize("name", list(ALL_CHECKS))
def test_acceptance(name, capsys):
    result = ALL_CHECKS[name]()
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.detail
