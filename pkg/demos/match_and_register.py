"""Build a bank, train both networks briefly, then match and register a deformed cell.

Short training (about a minute on one core), so the numbers are rougher
than the test fixtures.  Pass ``--full`` for the default schedules.
"""

import argparse

import numpy as np
import torch

from diffkillr.benchmarks import archetype_entries
from diffkillr.diffeo_gen import AugmentationConfig, make_warp, sample_diffeo
from diffkillr.invariant_net import InvariantTrainConfig, embed_bank, match, train_invariant
from diffkillr.mapping_net import MappingTrainConfig, register, train_mapping, transfer_label
from diffkillr.patch_bank import CellBank, build_augmented_bank
from diffkillr.synth import default_archetypes, dice


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--full", action="store_true", help="default training schedules (several minutes)")
    args = ap.parse_args()
    torch.set_num_threads(1)

    entries = archetype_entries(default_archetypes(4))
    bank = build_augmented_bank(CellBank(entries), 16, AugmentationConfig(), seed=0)
    inv_cfg = InvariantTrainConfig(seed=0) if args.full else InvariantTrainConfig(epochs=40, seed=0)
    map_cfg = MappingTrainConfig(seed=0) if args.full else MappingTrainConfig(epochs=8, seed=0)
    encoder = train_invariant(bank, inv_cfg)
    bank = embed_bank(encoder, bank)
    mapper = train_mapping(bank, map_cfg)

    rng = np.random.default_rng(1)
    for j, entry in enumerate(entries):
        spec = sample_diffeo(rng, AugmentationConfig())
        w = make_warp(spec, 32, 32)
        query, truth = entry.patch.warped(w), entry.labels.warped(w)
        best = match(encoder, query, bank)
        rec = bank.record(best.i, best.j)
        result = register(mapper, rec.patch, query)
        moved = transfer_label(result, rec.labels)
        print(f"archetype {j} under {spec.kind:<20} matched {rec.entry}  "
              f"transferred mask DSC {dice(moved.mask(), truth.mask()):.3f}")


if __name__ == "__main__":
    main()
