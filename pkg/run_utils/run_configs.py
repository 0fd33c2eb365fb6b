# Dictionary mapping run preset names (used in the --config flag) to their configurations.
# A JSON file with the same layout can be passed instead of a preset name.
RUN_CONFIGS = {
    "tiny": {
        "description": "Two planes, eight tokens. Used for gradient checks and unit tests; not runnable against phantom data.",
        "model": {
            "image_size": 16,
            "n_frames": 2,
            "patch_size": 8,  # the segmentation head restores exactly 8 pixels per patch
            "patch_frames": 2,
            "n_sa": 1,
            "n_la": 1,
            "embed_dim": 8,
            "depth": 2,
            "num_heads": 2,
            "decoder_dim": 8,
            "decoder_depth": 1,
            "decoder_heads": 2,
            "mlp_ratio": 2,
            "mask_ratio": 0.5,
        },
        "phenotype_head": {"embed_dim": 8, "hidden_dim": 8},
        "seg_head": {"seg_dim": 8, "skip_depths": [1, 2], "min_channels": 2, "temporal_channels": 2},
        "training": {"total_steps": 4, "checkpoint_every": 0},
    },
    "smoke": {
        "description": "Narrow model over 4-frame 64x64 phantoms (phantom-gen --frames 4). Used by the CLI smoke suite.",
        "model": {
            "image_size": 64,
            "n_frames": 4,
            "patch_size": 8,
            "patch_frames": 2,
            "embed_dim": 16,
            "depth": 2,
            "num_heads": 2,
            "decoder_dim": 8,
            "decoder_depth": 1,
            "decoder_heads": 1,
            "mlp_ratio": 2,
        },
        "phenotype_head": {"embed_dim": 16, "hidden_dim": 16},
        "seg_head": {"seg_dim": 8, "skip_depths": [1, 2], "min_channels": 4, "temporal_channels": 2},
        "training": {"total_steps": 2, "finetune_steps": 2, "checkpoint_every": 1},
    },
    "desk": {
        "description": "Laptop-CPU scale: 64x64x50 planes, 8x8x25 patches, dim 128, 4 heads, 4 encoder / 2 decoder layers.",
        "model": {
            "image_size": 64,
            "n_frames": 50,
            "patch_size": 8,
            "patch_frames": 25,
            "embed_dim": 128,
            "depth": 4,
            "num_heads": 4,
            "decoder_dim": 64,
            "decoder_depth": 2,
            "decoder_heads": 4,
        },
        "phenotype_head": {"embed_dim": 128, "hidden_dim": 256},
        "seg_head": {"seg_dim": 64, "skip_depths": [2, 4]},
        "training": {"total_steps": 2000, "finetune_steps": 1000, "checkpoint_every": 500},
    },
    "full": {
        "description": "Published scale: 128x128x50 planes, dim 1024, 6 encoder / 2 decoder layers. Far beyond a CPU budget.",
        "model": {
            "image_size": 128,
            "n_frames": 50,
            "patch_size": 8,
            "patch_frames": 25,
            "embed_dim": 1024,
            "depth": 6,
            "num_heads": 16,
            "decoder_dim": 512,
            "decoder_depth": 2,
            "decoder_heads": 16,
        },
        "phenotype_head": {"embed_dim": 1024, "hidden_dim": 256},
        "seg_head": {"seg_dim": 576, "skip_depths": [2, 4], "min_channels": 36},
        "training": {"total_steps": 100000, "finetune_steps": 20000, "checkpoint_every": 5000},
    },
}
