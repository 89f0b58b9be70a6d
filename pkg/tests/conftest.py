import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from adsformer.embeddings import EmbeddingTable, PretrainedBundle
from adsformer.estimators import RankingDataset
from adsformer.rng import stream
from adsformer.sequences import GeneratorConfig, generate_impressions, generate_world

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_world():
    cfg = GeneratorConfig(num_users=60, num_listings=80, num_shops=10, num_taxonomies=4, max_len=8)
    return generate_world(cfg, 7)


@pytest.fixture(scope="session")
def small_data(small_world):
    train = generate_impressions(small_world, 600, stream(7, "test", "train"))
    valid = generate_impressions(small_world, 300, stream(7, "test", "valid"))
    return RankingDataset(small_world, train), RankingDataset(small_world, valid)


@pytest.fixture(scope="session")
def small_bundle(small_world):
    rng = stream(7, "test", "tables")
    L = small_world.num_listings
    return PretrainedBundle({
        "air": EmbeddingTable.frozen(rng.normal(size=(L, 256)) / 16, "air"),
        "visual": EmbeddingTable.frozen(rng.normal(size=(L, 256)) / 16, "visual"),
        "skipgram": EmbeddingTable.frozen(rng.normal(size=(L, 64)) / 8, "skipgram"),
    })


TINY_CONFIG = """\
data.num_users=60
data.num_listings=80
data.num_shops=10
data.num_taxonomies=4
data.max_len=8
data.n_train=400
data.n_valid=300
skipgram.epochs=1
air.n_pairs=256
air.batch_size=32
air.epochs=1
air.hidden=16
ctr.d1=8
ctr.num_heads=2
ctr.component3_dims=listing:4,shop:4,taxonomy:2
ctr.deep_sizes=8,4
ctr.max_steps=4
ctr.batch_size=64
pccvr.d1=8
pccvr.component3_dims=listing:4,shop:4,taxonomy:2
pccvr.deep_sizes=8,4
pccvr.max_steps=4
ablate.seeds=0,1
ablate.d1=4
ablate.num_heads=1
ablate.component3_dims=listing:2,shop:2,taxonomy:2
ablate.deep_sizes=4
ablate.max_steps=2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
