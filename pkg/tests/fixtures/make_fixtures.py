"""Regenerate the bundled fixtures: python3 tests/fixtures/make_fixtures.py"""
from pathlib import Path

import numpy as np

from dfwhittle.core import RmabInstance, make_rng, write_json
from dfwhittle.datagen import DatasetSpec, generate_dataset, generate_kernels, write_dataset

HERE = Path(__file__).parent

WORKED = np.array([[[0.8, 0.2], [0.2, 0.8]],
                   [[0.5, 0.5], [0.5, 0.5]]])


def main():
    write_json(HERE / "worked_example.json", RmabInstance(WORKED[None], [0.0, 1.0], 1, 10, 0.5).to_json())
    for m, seed in ((2, 101), (3, 103)):
        spec = DatasetSpec(num_instances=1, arms=2, states=m, budget=1, horizon=5, gamma=0.9, seed=seed)
        kernels = generate_kernels(spec, make_rng(seed))
        inst = RmabInstance(kernels, np.arange(m) / (m - 1), 1, 5, 0.9)
        write_json(HERE / f"pair_m{m}.json", inst.to_json())
    spec = DatasetSpec(num_instances=3, arms=2, states=2, budget=1, horizon=3, gamma=0.9, trajectories=2,
                       feature_dim=4, seed=5)
    write_dataset(HERE / "tiny_dataset", spec, generate_dataset(spec))


if __name__ == "__main__":
    main()
