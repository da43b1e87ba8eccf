import pytest

from attrdiff import config as C
from attrdiff.errors import ConfigurationError


def test_round_trip_through_yaml(tmp_path):
    cfg = C.reduced()
    p = tmp_path / "c.yaml"
    p.write_text(C.dump(cfg))
    back = C.load(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()


def test_hash_ignores_output_directory_only():
    a = C.reduced()
    d = a.to_dict()
    d["out_dir"] = "elsewhere"
    assert C.from_dict(d).hash() == a.hash()
    d["train"]["lr"] = 0.5
    assert C.from_dict(d).hash() != a.hash()
    assert a.with_seed(1).hash() != a.hash() and a.with_seed(1).seed == 1


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"train": {"bogus": 1}},
    {"train": {"lr": "fast"}},
    {"augment": {"rate": 2.0}},
    {"format_version": 7},
    {"world": {"n_images": 0}},
])
def test_invalid_configs_rejected(patch):
    d = C.ExperimentConfig().to_dict()
    for k, v in patch.items():
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    with pytest.raises(ConfigurationError):
        C.from_dict(d)


def test_defaults():
    cfg = C.ExperimentConfig()
    assert cfg.augment.rate == 0.3 and cfg.augment.alpha_max == 2.5
    assert cfg.train.mode == "adapter" and cfg.pretrain.mode == "base"
    assert len(cfg.metrics.alphas) == 13
    assert cfg.train.lr == 1e-5 and cfg.train.lambda_id == 1.0 and cfg.train.weight_decay == 0.01
    assert cfg.train.id_loss_max_t is None
    r = C.reduced()
    assert r.model.image_size == 16 and r.train.steps <= 2000
