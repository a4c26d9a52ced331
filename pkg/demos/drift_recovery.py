"""One organization, MLP model, an attack pattern that moves mid-stream.

Prints the sliding-window prequential accuracy every 500 records so the dip
after the drift at record 10,000 and the recovery are visible.
"""
from fedstream.dag_pipeline import Pipeline, PipelineConfig, make_model
from fedstream.simulator import DriftEvent, default_config, gen_synthetic

DRIFT_AT = 10_000


def main(seed: int = 0) -> None:
    cfg = default_config(n_patterns=2, n_orgs=1, records_per_org=16_000, label_fraction=1.0, seed=seed)
    moved = cfg.benign_mean.copy()
    moved[24:30] += 0.3  # pattern 0 now lives on a feature block nobody has seen
    cfg.drift_events = [DriftEvent(DRIFT_AT, 0, moved)]
    schema = cfg.schema()
    params = {"init_seed": seed}
    pipe = Pipeline(PipelineConfig(schema, "mlp", params, window=200), make_model("mlp", schema, params))
    for i, rec in enumerate(gen_synthetic(cfg)[0].records, 1):
        pipe.process(rec)
        if i % 500 == 0:
            mark = "  <- drift" if i == DRIFT_AT + 500 else ""
            print(f"{i:>6}  window accuracy {pipe.metrics.accuracy:.3f}{mark}")


if __name__ == "__main__":
    main()
