"""Shared builders for federation-level tests: tiny configs, clients, servers."""

import numpy as np

from afedcl.config import ExperimentConfig
from afedcl.data import Dataset, SyntheticSpec
from afedcl.federation import AblationFlags, ClientState, ServerState
from afedcl.models import NetworkConfig, build_models, clone, param_count
from afedcl.numerics import make_optimizer

from straightline import OracleClient

TINY_NET = NetworkConfig(input_dim=2, num_classes=2, feature_dim=3, encoder_hidden=(), discriminator_hidden=4)


def tiny_config(method="afedcl", **overrides) -> ExperimentConfig:
    network = overrides.pop("network", TINY_NET)
    defaults = dict(
        method=method,
        rounds=1,
        num_clients=2,
        balance=0.1,
        prox_mu=0.01,
        optimizer="sgd",
        learning_rate=0.05,
        dcc_epochs=2,
        aff_epochs=1,
        train_per_client=4,
        seed=0,
        network=network,
        synthetic=SyntheticSpec(
            num_classes=network.num_classes,
            input_dim=network.input_dim,
            noise_sigma=1.0,
            samples_per_class=30,
            seed=0,
        ),
        flags=AblationFlags(),
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def random_dataset(seed, n, network=TINY_NET) -> Dataset:
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, network.input_dim))
    labels = rng.integers(0, network.num_classes, size=n)
    labels[0] = 0  # keep at least one fixed label for reproducible edge cases
    return Dataset(features, labels, network.num_classes)


def make_client(client_id, dataset, config, model_seed=7) -> ClientState:
    encoder, classifier, discriminator = build_models(config.network, model_seed)
    return ClientState(
        client_id=client_id,
        encoder=encoder,
        classifier=classifier,
        discriminator=discriminator,
        fusion_weight=0.5,
        opt_encoder=make_optimizer(config.optimizer, config.learning_rate, param_count(encoder)),
        opt_classifier=make_optimizer(config.optimizer, config.learning_rate, param_count(classifier)),
        opt_discriminator=make_optimizer(config.optimizer, config.learning_rate, param_count(discriminator)),
        opt_fusion=make_optimizer(config.optimizer, config.learning_rate, 1),
        train_set=dataset,
        rng=np.random.default_rng([config.seed, 4, client_id]),
    )


def make_server(config, model_seed=11) -> ServerState:
    encoder, classifier, _ = build_models(config.network, model_seed)
    return ServerState(
        global_encoder=encoder,
        roster=list(range(config.num_clients)),
        global_classifier=classifier if config.method in ("fedavg", "fedprox") else None,
    )


def oracle_from_client(client: ClientState) -> OracleClient:
    """Snapshot a single-affine-encoder client into the straight-line oracle."""
    assert len(client.encoder.layers) == 1 and len(client.classifier.layers) == 1
    assert len(client.discriminator.layers) == 2
    return OracleClient(
        We=client.encoder.layers[0].weights,
        be=client.encoder.layers[0].bias,
        Wc=client.classifier.layers[0].weights,
        bc=client.classifier.layers[0].bias,
        Wd1=client.discriminator.layers[0].weights,
        bd1=client.discriminator.layers[0].bias,
        Wd2=client.discriminator.layers[1].weights,
        bd2=client.discriminator.layers[1].bias,
        fusion=client.fusion_weight,
        x=client.train_set.features,
        y=client.train_set.labels,
    )


def clone_client(client: ClientState, config) -> ClientState:
    """Fresh optimizer state, identical parameters and data."""
    return ClientState(
        client_id=client.client_id,
        encoder=clone(client.encoder),
        classifier=clone(client.classifier),
        discriminator=clone(client.discriminator),
        fusion_weight=client.fusion_weight,
        opt_encoder=make_optimizer(config.optimizer, config.learning_rate, param_count(client.encoder)),
        opt_classifier=make_optimizer(config.optimizer, config.learning_rate, param_count(client.classifier)),
        opt_discriminator=make_optimizer(config.optimizer, config.learning_rate, param_count(client.discriminator)),
        opt_fusion=make_optimizer(config.optimizer, config.learning_rate, 1),
        train_set=client.train_set,
        rng=np.random.default_rng([config.seed, 4, client.client_id]),
    )
