import pytest

from flowir import scenegen, training


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    scenegen.generate_corpus(24, 4, (16, 16), seed=11, out_dir=str(out))
    return str(out)


@pytest.fixture(scope="session")
def tiny_train(tiny_corpus):
    return training.load_corpus(tiny_corpus, "train")


@pytest.fixture(scope="session")
def tiny_test(tiny_corpus):
    return training.load_corpus(tiny_corpus, "test")


@pytest.fixture(scope="session")
def small_flow_model(tiny_train):
    cfg = training.TrainConfig(
        mode="flow", epochs=120, batch_size=8, lr=2e-3, weight_decay=0.0,
        seed=0, base_channels=8,
    )
    model, _, _, _ = training.fit(tiny_train, cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_renderer(tiny_train):
    cfg = training.TrainConfig(
        mode="renderer", epochs=120, batch_size=8, lr=2e-3, weight_decay=0.0,
        seed=0, base_channels=8,
    )
    model, _, _, _ = training.fit(tiny_train, cfg)
    model.eval()
    return model
