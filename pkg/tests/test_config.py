import pytest

from clp.config import RunConfig, dump_config, load_config, parse_config
from clp.errors import ConfigError


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.train.lam == 0.6 and cfg.model.hidden_widths == (256, 128)


def test_values_and_alias():
    cfg = parse_config("""
[data]
classes = 3
noise_kind = uniform
noise_ratio = 0.4
[model]
hidden_widths = 16, 8
[train]
lambda = 0.25
detach_saliency = yes
[eval]
saliency_indices = 0, 5
""")
    assert cfg.data.classes == 3 and cfg.data.noise_kind == "uniform"
    assert cfg.model.hidden_widths == (16, 8)
    assert cfg.train.lam == 0.25 and cfg.train.detach_saliency is True
    assert cfg.eval.saliency_indices == (0, 5)


@pytest.mark.parametrize("text, where", [
    ("[train]\nfoo = 1\n", "train.foo"),
    ("[train]\nlam = 1\n", "train.lam"),
    ("[bogus]\nx = 1\n", "bogus"),
    ("[data]\nclasses = many\n", "data.classes"),
    ("[data]\nnoise_kind = gaussian\n", "data.noise_kind"),
    ("[augment]\nmode = neither\n", "augment.mode"),
    ("[train]\ndetach_saliency = maybe\n", "train.detach_saliency"),
])
def test_errors_name_the_key(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_dump_round_trip(tmp_path):
    cfg = parse_config("[train]\nlambda = 0.1\n[eval]\nsaliency_indices = 3\n")
    p = tmp_path / "c.ini"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
