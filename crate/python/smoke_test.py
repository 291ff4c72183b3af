"""Smoke test for the seqsched_py extension.

Build first:  pip install --no-build-isolation -e crates/py
Run:          python python/smoke_test.py
"""
import math
import pathlib
import tempfile

import seqsched_py as sq

ROOT = pathlib.Path(__file__).resolve().parents[1]


def main():
    sc = sq.Scenario.load(str(ROOT / "scenarios" / "table1.cfg"))
    assert sc.n == 5 and math.isclose(sc.t_frame, 0.1)

    pol = sq.solve(sc, scheme="optimal", objective="sum")
    assert sorted(pol.sequence) == list(range(5))
    assert math.isclose(sum(pol.blocks), sc.t_frame, rel_tol=1e-6)
    assert math.isclose(sum(pol.energies), pol.system_energy, rel_tol=1e-12)
    assert all(0.4 - 1e-9 <= r <= 1 + 1e-9 for r in pol.compression_ratios)
    print("optimal sum:", pol)

    bench = sq.solve(sc, scheme="benchmark")
    g = sq.gain(pol.system_energy, bench.system_energy)
    assert 0 < g < 1
    print(f"gain over benchmark: {g:.3f}")

    n3 = sq.Scenario.load(str(ROOT / "scenarios" / "n3.cfg"))
    best = sq.oracle(n3, objective="minmax")
    pen, trace = sq.algorithm1(n3, objective="minmax")
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    gap = (pen.objective_value - best.objective_value) / abs(best.objective_value)
    assert -1e-6 <= gap <= 1e-3, gap
    print(f"n3 minmax gap: {gap:.2e}")

    try:
        sq.solve(sc.with_t_frame(1e-3))
    except sq.InfeasibleError as e:
        print("1 ms frame:", e)
    else:
        raise AssertionError("1 ms frame should be infeasible")

    try:
        sq.Scenario.from_toml("[[devices]]\npacket_kbits = -1\ndistance_m = 10\n")
    except sq.ConfigError:
        pass
    else:
        raise AssertionError("negative packet size should be rejected")

    with tempfile.TemporaryDirectory() as d:
        path = pathlib.Path(d) / "sweep.csv"
        rows = sq.sweep(n3, (50, 80, 10), schemes=["optimal", "benchmark"], objectives=["sum"], csv_path=str(path))
        assert len(rows) == 8
        assert path.read_text().splitlines()[0].startswith("t_frame_s,scheme,objective")
        again = sq.sweep(n3, (50, 80, 10), schemes=["optimal", "benchmark"], objectives=["sum"])
        assert rows == again

    worst = max(err for _, _, err in sq.gradcheck(n3, points=5))
    assert worst < 1e-6, worst
    print("smoke test passed")


if __name__ == "__main__":
    main()
