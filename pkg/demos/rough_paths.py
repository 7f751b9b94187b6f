"""Rough path lifts: Chen's relation, the Ito correction and the Levy area.

Run with ``python demos/rough_paths.py``.
"""
import numpy as np

from roughsde import chen_defect, lift_brownian, lift_fbm, lift_smooth, make_grid, symmetrization_defect


def main():
    g = make_grid(1.0, 256)

    # smooth path (t, t^2): the second level is known in closed form
    rp = lift_smooth(lambda t: np.stack([t, t ** 2], -1), g, refine=256)
    print("XX_{0,1} of (t, t^2):\n", rp.XX(0, g.N))

    print(f"{'lift':<16}{'chen':>12}{'sym':>12}")
    lifts = dict(
        ito=lift_brownian(2, g, seed=1, calculus="ito", subgrid=16, n_samples=64),
        stratonovich=lift_brownian(2, g, seed=1, calculus="stratonovich", subgrid=16, n_samples=64),
        fbm_H0p7=lift_fbm(0.7, 2, g, seed=1, n_samples=64),
    )
    for name, lift in lifts.items():
        # the Ito lift is not geometric, so its symmetric part is not dX (x) dX / 2
        sym = symmetrization_defect(lift) if lift.flavor == "geometric" else float("nan")
        print(f"{name:<16}{chen_defect(lift):12.2e}{sym:12.2e}")

    # Ito and Stratonovich agree on the area and differ by (t - s) Id / 2 on the symmetric part
    ito, strat = lifts["ito"], lifts["stratonovich"]
    gap = strat.XX(0, g.N) - ito.XX(0, g.N)
    print("strat - ito at (0, 1), averaged:\n", gap.mean(axis=0))
    area = 0.5 * (ito.XX(0, g.N)[:, 0, 1] - ito.XX(0, g.N)[:, 1, 0])
    print(f"Levy area: mean {area.mean():+.3f}, variance {area.var():.3f} (theory 0, 0.25)")


if __name__ == "__main__":
    main()
