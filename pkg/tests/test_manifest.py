import pytest

from fedsign.errors import ConfigError
from fedsign.manifest import RunManifest, parse_manifest

FULL = """
# experiment description
arch = mlp
classes = 4
per_class = 250
test_per_class = 100
data_kind = blobs
data_dim = 32
split = noniid
concentration = 0.3
clients = 8
fraction = 0.5
rounds = 60
local_epochs = 2
batch = 16
backdoor_batch = 2
lr = 0.01
momentum = 0.9
lr_decay = 0.99
dp_sigma = 0.003
seed = 7
out_dir = runs/full
embed.0 = mode=scale bits=8 loss=hinge beta=3.0
embed.3 = mode=kernel bits=32 loss=bce beta=3.0 triggers=10 alpha=1.0
attack.prune = 0.1,0.5,0.9
attack.finetune_epochs = 10,50
attack.finetune_lr = 0.0001
sweep.kind = reliability_bits
sweep.values = 4,8,16
sweep.seeds = 5
"""


def test_full_manifest_parses():
    m = parse_manifest(FULL)
    assert m.arch == "mlp" and m.split == "noniid" and m.concentration == 0.3
    assert m.fed.n_clients == 8 and m.fed.fraction == 0.5 and m.fed.dp_sigma == 0.003
    assert m.seed == 7 and m.out_dir == "runs/full"
    assert set(m.embed) == {0, 3}
    assert m.embed[0].mode == "scale" and m.embed[0].beta == 3.0
    assert m.embed[3].loss == "bce" and m.embed[3].n_triggers == 10
    assert m.attack_prune == (0.1, 0.5, 0.9)
    assert m.attack_finetune_epochs == (10, 50)
    assert m.sweep_kind == "reliability_bits" and m.sweep_values == (4.0, 8.0, 16.0)


def test_defaults_without_keys():
    m = parse_manifest("classes = 3")
    assert m.classes == 3
    assert m.fed.rounds == RunManifest().fed.rounds
    assert m.embed == {}


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_manifest("learning_rate = 0.1")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="twice"):
        parse_manifest("seed = 1\nseed = 2")


def test_bad_line_rejected():
    with pytest.raises(ConfigError, match="line 2"):
        parse_manifest("seed = 1\nnot a key value line")


def test_embed_unknown_field_rejected():
    with pytest.raises(ConfigError, match="gamma"):
        parse_manifest("embed.0 = gamma=1.0")


def test_embed_bad_mode_rejected():
    with pytest.raises(ConfigError, match="mode"):
        parse_manifest("embed.0 = mode=activations beta=1.0")


def test_embed_client_out_of_range():
    with pytest.raises(ConfigError, match="no such client"):
        parse_manifest("clients = 2\nembed.5 = beta=1.0")


def test_missing_watermark_spec_rejected():
    with pytest.raises(ConfigError, match="missing watermark spec"):
        parse_manifest("embed.0 = beta=1.0 bits=0")


def test_alpha_needs_triggers():
    with pytest.raises(ConfigError, match="triggers"):
        parse_manifest("embed.0 = alpha=1.0")


def test_bad_sweep_kind_rejected():
    with pytest.raises(ConfigError, match="sweep.kind"):
        parse_manifest("sweep.kind = banana")


def test_bad_arch_rejected():
    with pytest.raises(ConfigError, match="arch"):
        parse_manifest("arch = transformer")


def test_fraction_validated_through_fedconfig():
    with pytest.raises(ConfigError):
        parse_manifest("fraction = 0.0")
