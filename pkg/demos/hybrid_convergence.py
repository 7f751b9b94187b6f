"""Strong convergence of the Davie scheme on dY = a Y dt + c Y dB + lam Y dX.

The driver X is one fixed Stratonovich Brownian path, independent of B, so the
closed form Y_t = xi exp((a - c^2/2) t + c B_t + lam (X_t - X_0)) is available.
Run with ``python demos/hybrid_convergence.py``.
"""
from roughsde import ExperimentConfig, run_convergence_study


def main():
    cfg = ExperimentConfig.from_dict(dict(
        coefficients=dict(w=1, dim_B=1, dim_X=1, b=dict(name="linear", lam=0.5),
                          sigma=dict(name="linear", lam=0.3), f=dict(name="linear", lam=0.5)),
        rough=dict(kind="brownian", calculus="stratonovich", alpha=0.45, seed=11),
        ladder=[64, 128, 256, 512, 1024], n_samples=1024, oracle="linear"))
    rep = run_convergence_study(cfg, workers=4)
    print(f"{'N':>6}{'L2 error':>12}{'stderr':>11}{'relative':>11}")
    for r in rep["rows"]:
        print(f"{r['N']:6d}{r['error']:12.4e}{r['stderr']:11.2e}{r['rel_error']:11.2e}")
    fit = rep["fit"]
    print(f"fitted order {fit['slope']:.3f} +- {fit['halfwidth']:.3f} (R^2 {fit['r2']:.3f})")


if __name__ == "__main__":
    main()
