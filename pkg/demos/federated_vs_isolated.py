"""Four organizations, each seeing two of four attack patterns.

Runs the isolated and federated arms over identical streams and prints the
held-out comparison.  Pass a model kind (nb, mlp, forest) as the argument.
"""
import sys

from fedstream.simulator import default_config, run_experiment


def main(kind: str = "nb") -> None:
    cfg = default_config(n_patterns=4, n_orgs=4, patterns_per_org=2, records_per_org=6000,
                         label_fraction=0.5, seed=0)
    params = {"hidden_sizes": [32, 16]} if kind == "mlp" else {}
    report = run_experiment(cfg, kind, params, every_n_records=2000, heldout_records=3000)
    print(report.to_text())


if __name__ == "__main__":
    main(*sys.argv[1:2])
