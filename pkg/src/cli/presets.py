"""
Run Presets
Named configuration overlays selectable with --preset; a --config file is
layered on top. Preset learning rates are tuned for training from scratch
at desk scale and are higher than the library default.
"""

from typing import Any, Dict

PRESETS: Dict[str, Dict[str, Any]] = {
    # end-to-end pipeline check in a few minutes on a laptop
    "smoke": {
        "dataset": {"num_scenes": 300, "detection_scenes": 60},
        "model": {"d": 32, "heads": 4, "enc_layers": 1, "dec_layers": 1},
        "train": {"epochs": 3, "lr": 1e-3, "batch_size": 16},
        "cycle": {"epochs": 3, "lr": 5e-4, "batch_size": 16, "cycle_every": 5,
                  "pseudo_start_epoch": 1, "pseudo_refresh_every": 1},
        "beam": {"beam_width": 2},
    },
    # the full desk-scale benchmark: 5000 scenes, up to 5 objects
    "desk": {
        "dataset": {"num_scenes": 5000, "detection_scenes": 1000},
        "model": {"d": 128},
        "train": {"epochs": 20, "lr": 3e-4, "batch_size": 32},
        "cycle": {"epochs": 20, "lr": 1e-4, "batch_size": 32, "cycle_every": 10,
                  "pseudo_start_epoch": 10, "pseudo_refresh_every": 5},
    },
    # 32 single-object scenes memorised by a d=64 model
    "overfit": {
        "scene": {"max_objects": 1},
        "dataset": {"num_scenes": 32, "val_ratio": 0.0, "test_ratio": 0.0},
        "model": {"d": 64},
        "train": {"epochs": 20, "lr": 1e-3, "batch_size": 32, "weight_decay": 0.0, "checkpoint_every": 0},
        "cycle": {"epochs": 500, "lr": 1e-3, "batch_size": 32, "weight_decay": 0.0, "checkpoint_every": 0,
                  "weights": {"lm": 1.0, "itc": 0.0, "itg": 0.0, "itm": 0.0, "cyc": 0.0},
                  "cycle_every": 100},
        "beam": {"beam_width": 1},
    },
}


def preset_names():
    return sorted(PRESETS)
