"""A sharing round done by hand: train, post envelopes, close, apply.

Shows that the naive Bayes consensus equals a model trained on everyone's
data, and what an envelope looks like on the wire.
"""
import numpy as np

from fedstream.federation import (
    CommunityConfig,
    ShareStore,
    apply_consensus,
    close_round,
    export_for_sharing,
    post_envelope,
)
from fedstream.featurizer import numeric_schema
from fedstream.model_core import ClassLabel, describe
from fedstream.nb_classifier import NaiveBayesModel


def main() -> None:
    schema = numeric_schema(6, 0.0, 1.0, 8)
    rng = np.random.default_rng(0)
    orgs = ["acme", "globex", "initech"]
    store = ShareStore(CommunityConfig("demo", [(o, 1.0) for o in orgs], "nb"))
    local = {o: NaiveBayesModel.create(schema) for o in orgs}
    pooled = NaiveBayesModel.create(schema)
    for o in orgs:
        for _ in range(200):
            y = ClassLabel(int(rng.integers(2)))
            x = rng.normal(0.3 + 0.4 * int(y), 0.1, 6)
            local[o].train_one(x, y)
            pooled.train_one(x, y)
        print(post_envelope(store, 1, export_for_sharing(local[o], o, 1)))
    consensus = close_round(store, 1)
    print("\n".join(describe(consensus)))
    for o in orgs:
        local[o] = apply_consensus(local[o], consensus)
        print(f"{o}: consensus equals pooled model: {local[o].hist == pooled.hist}")


if __name__ == "__main__":
    main()
