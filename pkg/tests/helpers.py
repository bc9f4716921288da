from dyngrain.train import RunConfig


def tiny_config(out_dir, **kw) -> RunConfig:
    base = dict(
        out_dir=str(out_dir),
        data={**RunConfig().data, "count": 16},
        dvae_channels=[8, 16], dvae_steps=4, dvae_batch=2,
        grain_steps=4, grain_batch=4,
        content_steps=4, content_batch=2,
        model_overrides={"hidden": 32, "heads": 2, "backbone_layers": 1, "refine_layers": 1},
        sample_steps=3,
    )
    base.update(kw)
    return RunConfig(**base)
