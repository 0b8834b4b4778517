import pytest

from sfda.config import AdaptationConfig, load_config, parse_config
from sfda.errors import ValidationError


def test_defaults():
    c = AdaptationConfig()
    w = c.loss.weights()
    assert (w.lambda_nm, w.lambda_pl, w.lambda_cons) == (1.0, 0.3, 1.0)
    assert c.stage1.smoothing == 0.1 and c.stage2.plr_alpha == 0.9
    assert c.stage3.mixup_concentration == 0.75 and c.task.bottleneck_dim == 256


def test_canonical_round_trip(tmp_path):
    c = AdaptationConfig().override(**{"stage2.epochs": 3, "task.target_domains": ["a", "b"]})
    back = load_config(c.save(tmp_path / "run.cfg"))
    assert back == c and back.hash() == c.hash()


def test_hash_tracks_values():
    a = AdaptationConfig()
    assert a.hash() == AdaptationConfig().hash()
    assert a.hash() != a.override(**{"loss.lambda_pl": 0.5}).hash()


def test_parse_comments_and_bare_strings():
    c = parse_config("# comment\ntask.source_domain = art   # trailing\nstage2.plr = false\n")
    assert c.task.source_domain == "art" and c.stage2.plr is False


@pytest.mark.parametrize("text", [
    "stage2.batch_size = 1",
    "optim.lr = 0",
    "loss.lambda_nm = -1",
    "stage2.plr_alpha = 1.5",
    "nosuch.key = 1",
    "stage2.nosuch = 1",
    "stage2.epochs",
])
def test_invalid(text):
    with pytest.raises(ValidationError):
        parse_config(text)
