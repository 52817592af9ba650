#!/usr/bin/env python3
"""
Example usage of the python-PAT library.

This script simulates a small limited-view dataset, trains a three-stage
DGD model and compares it with back-projection and TV on held-out samples.
"""

from python_pat import PatError, PhantomSpec, make_geometry, make_subsampling_mask
from python_pat.acoustics import estimate_lipschitz, operator_for
from python_pat.config import DgdConfig
from python_pat.dgd import reconstruct_dgd, run_training_cycle
from python_pat.grids import SeededRng
from python_pat.metrics import unbiased_rel_error
from python_pat.phantoms import build_dataset
from python_pat.variational import tv_reconstruct


def main():
    """Main example function."""

    # 32x32 grid, 16 sensor locations on the top edge, every second one active
    full = make_geometry((32, 32), n_t=64, padding=16)
    geometry = full.with_mask(make_subsampling_mask(full, 2, SeededRng(7)))
    operator = operator_for(geometry)
    print(f"Using {geometry.n_active} of {len(geometry.sensors)} sensors, {geometry.n_t} time samples")

    try:
        # Example 1: Simulate training and test data
        print("\n1. Simulating vessel phantoms and noisy measurements...")
        train = build_dataset(16, PhantomSpec.vessels(1), geometry, 15.0, SeededRng(1), operator=operator)
        test = build_dataset(4, PhantomSpec.vessels(999), geometry, 15.0, SeededRng(999), operator=operator)
        print(f"   {len(train)} training and {len(test)} test samples")

        # Example 2: Greedy stage-wise training
        print("\n2. Training a 3-stage DGD model...")
        model = run_training_cycle(train, geometry, DgdConfig(k_max=3, steps_per_stage=300, lr=1e-3),
                                   operator=operator)
        for k, loss in enumerate(model.metadata['staged_losses']):
            print(f"   training loss after stage {k}: {loss:.4g}")

        # Example 3: Compare methods on the test set
        print("\n3. Reconstructing the test set...")
        lipschitz = estimate_lipschitz(geometry, 30, SeededRng(5))
        for sample in test:
            x_dgd, _ = reconstruct_dgd(sample.y, geometry, model, operator)
            x_tv, _ = tv_reconstruct(sample.y, operator, lipschitz, 1e-3, 20, record_objective=False)
            errors = [unbiased_rel_error(x, sample.x_true)[0] for x in (sample.x0, x_tv, x_dgd)]
            print(f"   sample {sample.index}: adjoint {errors[0]:.3f}  tv {errors[1]:.3f}  dgd {errors[2]:.3f}")

    except PatError as e:
        print(f"Reconstruction error: {e}")


if __name__ == "__main__":
    main()
