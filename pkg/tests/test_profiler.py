import math

import numpy as np
import pytest

from bsvit.profiler import (E_SIGN, E_SOP, AttentionStats, EnergyLedger, energy_from_counts, estimate_energy,
                            format_energy_uj, multiply_trap, trap_guard, trap_release)

# published operation counts (millions) with their listed energies (uJ)
TABLE = [(178.78, 0.22, 14.58), (255.03, 0.26, 20.59), (513.82, 0.54, 41.58),
         (204.88, 0.23, 16.64), (411.43, 0.47, 33.44)]


def test_constants():
    assert E_SOP == 77e-15 and E_SIGN == 3.7e-12


def test_empty_ledger_is_zero():
    assert estimate_energy(EnergyLedger()) == 0.0


def test_energy_formula_oracle():
    led = EnergyLedger()
    led.add_sop("a", 1000)
    led.add_sign("a", 10)
    led.add_mac("stem", 10**9)  # tallied, never priced
    assert estimate_energy(led) == pytest.approx(1000 * 77e-15 + 10 * 3.7e-12)
    assert led.n_mac == 10**9


def test_macs_excluded():
    led = EnergyLedger()
    led.add_mac("head", 5000)
    assert estimate_energy(led) == 0.0


@pytest.mark.parametrize("sops,signs,listed", TABLE)
def test_published_rows_consistent_with_count_rounding(sops, signs, listed):
    # counts are printed to 0.01M: the true energy can move by half a unit of each
    lo = energy_from_counts((sops - 0.005) * 1e6, (signs - 0.005) * 1e6) * 1e6
    hi = energy_from_counts((sops + 0.005) * 1e6, (signs + 0.005) * 1e6) * 1e6
    assert lo - 0.005 <= listed <= hi + 0.005


def test_ledger_merge_commutative():
    a, b = EnergyLedger(), EnergyLedger()
    a.add_sop("x", 3)
    a.add_sign("y", 1)
    b.add_sop("x", 4)
    b.add_attention("att", AttentionStats(timesteps=1, tokens=4, q_events=2))
    assert a.merge(b) == b.merge(a)
    assert a.merge(b).n_sop == 7


def test_negative_increment_rejected():
    with pytest.raises(ValueError):
        EnergyLedger().add_sop("x", -1)


def test_reset_and_to_dict():
    led = EnergyLedger()
    led.add_sop("x", 5)
    assert led.to_dict()["totals"]["sop"] == 5
    led.reset()
    assert led.n_sop == 0


def test_trap_records_float_products():
    with multiply_trap() as rep:
        a, b = trap_guard("demo", np.ones(3), np.ones(3))
        trap_release(a * b)
    assert rep.n_violations == 1 and "demo" in rep.scopes


def test_trap_ignores_additions_and_integer_masks():
    with multiply_trap() as rep:
        a, m = trap_guard("demo", np.ones(3), np.array([1, 0, 1]))
        trap_release(a + a)
        trap_release(m * m)
    assert rep.n_violations == 0


def test_trap_inactive_outside_context():
    a = trap_guard("demo", np.ones(2))
    assert type(a) is np.ndarray


def test_format():
    assert format_energy_uj(14.58e-6) == "14.58uJ"
    assert format_energy_uj(math.nan) == "nan"
