"""Federated training rounds: the adversarial-consensus method plus baselines.

One communication round of the full method:

  1. clients download the current global encoder,
  2. stage 1 (dynamic consensus construction): each client trains classifier
     and encoder on the classification loss while playing an adversarial game
     with a local discriminator that separates local from global features,
  3. clients upload the stage-1 encoder and their discrimination loss,
  4. stage 2 (adaptive feature fusion): each client trains encoder, classifier
     and a scalar fusion weight on features blended from the *same* round's
     global encoder,
  5. the server aggregates the uploaded encoders, weighted by discrimination
     loss (consensus-aware) or by sample count.

FedAvg and FedProx exchange the full encoder+classifier model and aggregate by
sample count; local_only never communicates. All per-client updates compute
every gradient from one forward pass and apply them simultaneously.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ClientSplit, Dataset, partition_dirichlet, partition_disjoint, subsample_train, synth_generate
from .metrics import MetricsRow, evaluate
from .models import (
    Mlp,
    build_models,
    classify,
    clone,
    encode,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    param_count,
    params_to_vector,
    vector_to_params,
)
from .numerics import OptimizerState, make_optimizer, optimizer_step, softmax_cross_entropy

log = logging.getLogger(__name__)

AFEDCL = "afedcl"
FEDAVG = "fedavg"
FEDPROX = "fedprox"
LOCAL_ONLY = "local_only"
METHODS = (AFEDCL, FEDAVG, FEDPROX, LOCAL_ONLY)

FULL_BATCH_LIMIT = 64
MINIBATCH_SIZE = 32

# Fusion weights are unconstrained; values far outside the unit interval are
# worth a warning because they signal a diverging stage-2 optimization.
FUSION_WARN_LOW = -0.25
FUSION_WARN_HIGH = 1.25


class RoundError(RuntimeError):
    """A client failed inside a communication round."""


@dataclass
class AblationFlags:
    enable_dcc: bool = True
    enable_caa: bool = True
    enable_aff: bool = True
    enable_encoder_adversarial_update: bool = True


@dataclass
class ClientState:
    client_id: int
    encoder: Mlp
    classifier: Mlp
    discriminator: Mlp
    fusion_weight: float
    opt_encoder: OptimizerState
    opt_classifier: OptimizerState
    opt_discriminator: OptimizerState
    opt_fusion: OptimizerState
    train_set: Dataset
    rng: np.random.Generator
    last_classification_loss: float | None = None
    last_discrimination_loss: float | None = None
    last_discriminator_accuracy: float | None = None
    last_fused_loss: float | None = None


@dataclass
class ServerState:
    global_encoder: Mlp
    roster: list[int]
    round_index: int = 1
    aggregation_mode: str = "consensus_aware"
    global_classifier: Mlp | None = None  # baselines aggregate the full model


@dataclass
class FeatureBatch:
    """Paired local/global features with origin labels 0 (local) and 1 (global)."""

    features: np.ndarray  # (2*batch, feature_dim)
    origin_labels: np.ndarray  # (2*batch,) of 0 then 1


def build_feature_batch(local_features: np.ndarray, global_features: np.ndarray) -> FeatureBatch:
    if local_features.shape != global_features.shape:
        raise ValueError("local and global feature blocks must pair the same samples")
    batch = len(local_features)
    return FeatureBatch(
        features=np.concatenate([local_features, global_features], axis=0),
        origin_labels=np.concatenate([np.zeros(batch, dtype=np.int64), np.ones(batch, dtype=np.int64)]),
    )


@dataclass
class RoundReport:
    round_index: int
    rows: list[MetricsRow]  # one row per client plus one "global" row
    aggregation_weights: dict[int, float] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    server: ServerState
    clients: list[ClientState]
    reports: list[RoundReport]
    split: ClientSplit


# ---------------------------------------------------------------------------
# Losses and their gradients
# ---------------------------------------------------------------------------

def classification_loss(encoder: Mlp, classifier: Mlp, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of classifier(encoder(x)) and its gradients.

    Returns (loss, encoder_grad_vector, classifier_grad_vector).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    features, enc_cache = mlp_forward_cached(encoder, batch)
    logits, clf_cache = mlp_forward_cached(classifier, features)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    clf_grads, grad_features = mlp_backward(classifier, clf_cache, grad_logits)
    enc_grads, _ = mlp_backward(encoder, enc_cache, grad_features)
    return loss, enc_grads, clf_grads


def discrimination_loss(local_encoder: Mlp, global_encoder: Mlp, discriminator: Mlp, batch: np.ndarray):
    """Discriminator cross-entropy over paired local (0) and global (1) features.

    The global encoder is frozen: no gradient flows into it, and the encoder
    gradient flows only through the local-feature rows. Returns
    (loss, discriminator_grad_vector, encoder_grad_vector, discriminator_accuracy).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    local_features, enc_cache = mlp_forward_cached(local_encoder, batch)
    global_features = mlp_forward(global_encoder, batch)
    pairs = build_feature_batch(local_features, global_features)
    logits, disc_cache = mlp_forward_cached(discriminator, pairs.features)
    loss, grad_logits = softmax_cross_entropy(logits, pairs.origin_labels)
    disc_grads, grad_features = mlp_backward(discriminator, disc_cache, grad_logits)
    enc_grads, _ = mlp_backward(local_encoder, enc_cache, grad_features[: len(batch)])
    accuracy = float(np.mean(np.argmax(logits, axis=1) == pairs.origin_labels))
    return loss, disc_grads, enc_grads, accuracy


def fused_loss_and_grads(
    encoder: Mlp,
    global_encoder: Mlp,
    classifier: Mlp,
    fusion_weight: float,
    batch: np.ndarray,
    labels: np.ndarray,
):
    """Cross-entropy on blended features a*global + (1-a)*local.

    Returns (loss, encoder_grad_vector, classifier_grad_vector, fusion_grad);
    the global encoder is frozen.
    """
    local_features, enc_cache = mlp_forward_cached(encoder, batch)
    global_features = mlp_forward(global_encoder, batch)
    fused = fusion_weight * global_features + (1.0 - fusion_weight) * local_features
    logits, clf_cache = mlp_forward_cached(classifier, fused)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    clf_grads, grad_fused = mlp_backward(classifier, clf_cache, grad_logits)
    fusion_grad = float(np.sum(grad_fused * (global_features - local_features)))
    enc_grads, _ = mlp_backward(encoder, enc_cache, (1.0 - fusion_weight) * grad_fused)
    return loss, enc_grads, clf_grads, fusion_grad


# ---------------------------------------------------------------------------
# Local updates
# ---------------------------------------------------------------------------

def _batches(count: int, rng: np.random.Generator):
    """Full batch for small client datasets, else shuffled minibatches."""
    if count <= FULL_BATCH_LIMIT:
        return [np.arange(count)]
    order = rng.permutation(count)
    return [order[i : i + MINIBATCH_SIZE] for i in range(0, count, MINIBATCH_SIZE)]


def _step(net: Mlp, state: OptimizerState, grads: np.ndarray):
    new_vec, new_state = optimizer_step(state, params_to_vector(net), grads)
    return vector_to_params(net, new_vec), new_state


def dcc_local_update(
    client: ClientState,
    global_encoder: Mlp,
    epochs: int,
    balance: float,
    flags: AblationFlags | None = None,
) -> float:
    """Stage-1 adversarial training for one client.

    Per batch, with all gradients from the same forward pass:
      encoder       <- encoder - lr * (dL_cls/dE - balance * dL_disc/dE)
      classifier    <- classifier - lr * dL_cls/dC
      discriminator <- discriminator - lr * balance * dL_disc/dD
    With balance == 0 the adversarial term vanishes and the discriminator
    receives zero gradients, so it stays frozen. Stores and returns the mean
    discrimination loss over the final epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if balance < 0:
        raise ValueError("balance weight must be >= 0")
    flags = flags or AblationFlags()
    x, y = client.train_set.features, client.train_set.labels
    for _ in range(epochs):
        epoch_cls, epoch_disc, epoch_acc = [], [], []
        for idx in _batches(len(x), client.rng):
            cls_loss, enc_cls_grads, clf_grads = classification_loss(
                client.encoder, client.classifier, x[idx], y[idx]
            )
            disc_loss, disc_grads, enc_disc_grads, disc_acc = discrimination_loss(
                client.encoder, global_encoder, client.discriminator, x[idx]
            )
            if balance != 0.0 and flags.enable_encoder_adversarial_update:
                enc_grads = enc_cls_grads - balance * enc_disc_grads
            else:
                enc_grads = enc_cls_grads
            client.encoder, client.opt_encoder = _step(client.encoder, client.opt_encoder, enc_grads)
            client.classifier, client.opt_classifier = _step(client.classifier, client.opt_classifier, clf_grads)
            client.discriminator, client.opt_discriminator = _step(
                client.discriminator, client.opt_discriminator, balance * disc_grads
            )
            epoch_cls.append(cls_loss)
            epoch_disc.append(disc_loss)
            epoch_acc.append(disc_acc)
    client.last_classification_loss = float(np.mean(epoch_cls))
    client.last_discrimination_loss = float(np.mean(epoch_disc))
    client.last_discriminator_accuracy = float(np.mean(epoch_acc))
    return client.last_discrimination_loss


def aff_local_update(client: ClientState, global_encoder: Mlp, epochs: int) -> float:
    """Stage-2 training of encoder, classifier and the scalar fusion weight.

    The fusion weight is unconstrained as a plain gradient-descent parameter;
    runaway values only trigger a warning. Returns the mean fused loss over
    the final epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x, y = client.train_set.features, client.train_set.labels
    for _ in range(epochs):
        epoch_loss = []
        for idx in _batches(len(x), client.rng):
            loss, enc_grads, clf_grads, fusion_grad = fused_loss_and_grads(
                client.encoder, global_encoder, client.classifier,
                client.fusion_weight, x[idx], y[idx],
            )
            client.encoder, client.opt_encoder = _step(client.encoder, client.opt_encoder, enc_grads)
            client.classifier, client.opt_classifier = _step(client.classifier, client.opt_classifier, clf_grads)
            weight_vec, client.opt_fusion = optimizer_step(
                client.opt_fusion, np.array([client.fusion_weight]), np.array([fusion_grad])
            )
            client.fusion_weight = float(weight_vec[0])
            epoch_loss.append(loss)
    if not FUSION_WARN_LOW <= client.fusion_weight <= FUSION_WARN_HIGH:
        log.warning(
            "client %d fusion weight %.4f outside [%.2f, %.2f]",
            client.client_id, client.fusion_weight, FUSION_WARN_LOW, FUSION_WARN_HIGH,
        )
    client.last_fused_loss = float(np.mean(epoch_loss))
    return client.last_fused_loss


def fedavg_local_update(client: ClientState, epochs: int) -> float:
    """Plain local classification training (the FedAvg / local-only client step)."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x, y = client.train_set.features, client.train_set.labels
    for _ in range(epochs):
        epoch_loss = []
        for idx in _batches(len(x), client.rng):
            loss, enc_grads, clf_grads = classification_loss(
                client.encoder, client.classifier, x[idx], y[idx]
            )
            client.encoder, client.opt_encoder = _step(client.encoder, client.opt_encoder, enc_grads)
            client.classifier, client.opt_classifier = _step(client.classifier, client.opt_classifier, clf_grads)
            epoch_loss.append(loss)
    client.last_classification_loss = float(np.mean(epoch_loss))
    return client.last_classification_loss


def fedprox_local_update(client: ClientState, global_params: np.ndarray, epochs: int, mu: float) -> float:
    """FedAvg local training plus the proximal gradient mu * (w - w_global).

    global_params is the concatenated (encoder, classifier) vector the client
    downloaded this round. mu == 0 takes the exact FedAvg arithmetic path.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if mu < 0:
        raise ValueError("mu must be >= 0")
    enc_size = param_count(client.encoder)
    enc_ref, clf_ref = global_params[:enc_size], global_params[enc_size:]
    x, y = client.train_set.features, client.train_set.labels
    for _ in range(epochs):
        epoch_loss = []
        for idx in _batches(len(x), client.rng):
            loss, enc_grads, clf_grads = classification_loss(
                client.encoder, client.classifier, x[idx], y[idx]
            )
            if mu != 0.0:
                enc_grads = enc_grads + mu * (params_to_vector(client.encoder) - enc_ref)
                clf_grads = clf_grads + mu * (params_to_vector(client.classifier) - clf_ref)
            client.encoder, client.opt_encoder = _step(client.encoder, client.opt_encoder, enc_grads)
            client.classifier, client.opt_classifier = _step(client.classifier, client.opt_classifier, clf_grads)
            epoch_loss.append(loss)
    client.last_classification_loss = float(np.mean(epoch_loss))
    return client.last_classification_loss


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def consensus_weights(losses) -> np.ndarray:
    """Aggregation weights proportional to discrimination loss.

    Falls back to uniform weights when the losses sum to (numerically) zero.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("no losses to weight")
    if np.any(losses < 0):
        raise ValueError("discrimination losses must be >= 0")
    total = losses.sum()
    if total < 1e-12:
        return np.full(losses.size, 1.0 / losses.size)
    return losses / total


def _weighted_sum(vectors, weights: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vectors[0])
    for vec, w in zip(vectors, weights):
        out += w * vec
    return out


def consensus_aggregate(vectors, losses) -> np.ndarray:
    """Discrimination-loss-weighted average of parameter vectors."""
    if len(vectors) == 0:
        raise ValueError("nothing to aggregate")
    if len(vectors) != len(losses):
        raise ValueError(f"{len(vectors)} vectors but {len(losses)} losses")
    if len({len(v) for v in vectors}) != 1:
        raise ValueError("parameter vectors differ in length")
    return _weighted_sum(vectors, consensus_weights(losses))


def fedavg_aggregate(vectors, sample_counts) -> np.ndarray:
    """Sample-count-weighted average of parameter vectors."""
    counts = np.asarray(sample_counts, dtype=np.float64)
    if len(vectors) == 0:
        raise ValueError("nothing to aggregate")
    if len(vectors) != counts.size:
        raise ValueError(f"{len(vectors)} vectors but {counts.size} counts")
    if np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    if len({len(v) for v in vectors}) != 1:
        raise ValueError("parameter vectors differ in length")
    return _weighted_sum(vectors, counts / counts.sum())


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict(client: ClientState, global_encoder: Mlp, batch: np.ndarray, use_fusion: bool = True) -> np.ndarray:
    """Class predictions from fused (or local-only) features.

    Ties in the argmax resolve to the lowest class index.
    """
    local_features = encode(client.encoder, batch)
    if use_fusion:
        global_features = encode(global_encoder, batch)
        features = client.fusion_weight * global_features + (1.0 - client.fusion_weight) * local_features
    else:
        features = local_features
    return np.argmax(classify(client.classifier, features), axis=1)


# ---------------------------------------------------------------------------
# Rounds
# ---------------------------------------------------------------------------

def _afedcl_client_round(client: ClientState, round_encoder: Mlp, config, flags: AblationFlags):
    """Stages 1 and 2 for one client; returns the (upload vector, loss) pair.

    The upload snapshot is taken between the stages, which is what the server
    aggregates; stage 2 then keeps training the local model against the same
    round's global encoder.
    """
    balance = config.balance if flags.enable_dcc else 0.0
    dcc_local_update(client, round_encoder, config.dcc_epochs, balance, flags)
    upload = params_to_vector(client.encoder)
    loss = client.last_discrimination_loss
    if flags.enable_aff:
        aff_local_update(client, round_encoder, config.aff_epochs)
    return upload, loss


def _baseline_client_round(client: ClientState, global_vector: np.ndarray, config):
    """Replace the local model with the global one, train, return the upload."""
    enc_size = param_count(client.encoder)
    client.encoder = vector_to_params(client.encoder, global_vector[:enc_size])
    client.classifier = vector_to_params(client.classifier, global_vector[enc_size:])
    client.opt_encoder = make_optimizer(config.optimizer, config.learning_rate, enc_size)
    client.opt_classifier = make_optimizer(
        config.optimizer, config.learning_rate, param_count(client.classifier)
    )
    epochs = config.dcc_epochs + config.aff_epochs
    if config.method == FEDPROX:
        fedprox_local_update(client, global_vector, epochs, config.prox_mu)
    else:
        fedavg_local_update(client, epochs)
    return np.concatenate([params_to_vector(client.encoder), params_to_vector(client.classifier)])


def make_round_handler(client: ClientState, config, flags: AblationFlags):
    """The per-round client callback a transport backend drives."""

    def handle(round_index: int, params: np.ndarray):
        if config.method == AFEDCL:
            round_encoder = vector_to_params(client.encoder, params)
            return _afedcl_client_round(client, round_encoder, config, flags)
        upload = _baseline_client_round(client, params, config)
        return upload, float(client.last_classification_loss)

    return handle


def server_payload(server: ServerState, method: str) -> np.ndarray:
    """What the server broadcasts: the encoder, or the full baseline model."""
    if method == AFEDCL:
        return params_to_vector(server.global_encoder)
    return np.concatenate(
        [params_to_vector(server.global_encoder), params_to_vector(server.global_classifier)]
    )


def _global_predictor(server: ServerState):
    encoder, classifier = server.global_encoder, server.global_classifier

    def fn(batch):
        return np.argmax(classify(classifier, encode(encoder, batch)), axis=1)

    return fn


def _build_rows(
    server: ServerState,
    clients: list[ClientState],
    config,
    flags: AblationFlags,
    split: ClientSplit | None,
    round_index: int,
    round_encoder: Mlp | None,
    weights: dict[int, float] | None,
) -> list[MetricsRow]:
    rows = []
    for client in clients:
        row = MetricsRow(
            round=round_index,
            client_id=str(client.client_id),
            classification_loss=client.last_classification_loss,
            discrimination_loss=client.last_discrimination_loss,
            discriminator_accuracy=client.last_discriminator_accuracy,
            fused_loss=client.last_fused_loss,
            fusion_weight=client.fusion_weight if config.method == AFEDCL and flags.enable_aff else None,
            aggregation_weight=weights.get(client.client_id) if weights else None,
        )
        if split is not None:
            if config.method in (FEDAVG, FEDPROX):
                fn = _global_predictor(server)
            elif config.method == AFEDCL:
                fn = lambda x, c=client: predict(c, round_encoder, x, use_fusion=flags.enable_aff)
            else:
                fn = lambda x, c=client: predict(c, server.global_encoder, x, use_fusion=False)
            row.train_accuracy = evaluate(fn, client.train_set)[0]
            row.test_accuracy, row.macro_f1 = evaluate(fn, split.test[client.client_id])
        rows.append(row)

    mean_fields = (
        "classification_loss", "discrimination_loss", "discriminator_accuracy",
        "fused_loss", "fusion_weight", "train_accuracy", "test_accuracy", "macro_f1",
    )
    summary = MetricsRow(round=round_index, client_id="global")
    for name in mean_fields:
        values = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        if values:
            setattr(summary, name, float(np.mean(values)))
    if split is not None and config.method in (FEDAVG, FEDPROX):
        # One-fit-all methods also get the pooled-test view of the global model.
        summary.test_accuracy, summary.macro_f1 = evaluate(_global_predictor(server), split.global_test)
    rows.append(summary)
    return rows


def _complete_round(
    server: ServerState,
    clients: list[ClientState],
    uploads: list[tuple[int, np.ndarray, float]],
    config,
    flags: AblationFlags,
    split: ClientSplit | None,
) -> RoundReport:
    """Aggregate the collected uploads, advance the round, build the report."""
    round_index = server.round_index
    clients = sorted(clients, key=lambda c: c.client_id)  # aligns with sorted uploads
    vectors = [vec for _, vec, _ in uploads]
    if config.method == AFEDCL:
        round_encoder = clone(server.global_encoder)
        if flags.enable_caa:
            weights = consensus_weights([loss for _, _, loss in uploads])
        else:
            counts = np.array([len(c.train_set) for c in clients], dtype=np.float64)
            weights = counts / counts.sum()
        server.global_encoder = vector_to_params(server.global_encoder, _weighted_sum(vectors, weights))
    else:
        round_encoder = None
        counts = np.array([len(c.train_set) for c in clients], dtype=np.float64)
        weights = counts / counts.sum()
        aggregated = _weighted_sum(vectors, weights)
        enc_size = param_count(server.global_encoder)
        server.global_encoder = vector_to_params(server.global_encoder, aggregated[:enc_size])
        server.global_classifier = vector_to_params(server.global_classifier, aggregated[enc_size:])
    server.round_index = round_index + 1

    weight_map = {cid: float(w) for (cid, _, _), w in zip(uploads, weights)}
    rows = _build_rows(server, clients, config, flags, split, round_index, round_encoder, weight_map)
    return RoundReport(round_index, rows, weight_map)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    config,
    flags: AblationFlags | None = None,
    split: ClientSplit | None = None,
) -> RoundReport:
    """One synchronous communication round via direct calls.

    Mutates server and clients; evaluation columns are filled only when the
    train/test split is supplied.
    """
    if not clients:
        raise ValueError("at least one client required")
    flags = flags or AblationFlags()
    if config.method not in (AFEDCL, FEDAVG, FEDPROX):
        raise ValueError(f"run_round does not handle method {config.method!r}")
    clients = sorted(clients, key=lambda c: c.client_id)
    round_index = server.round_index

    uploads = []
    if config.method == AFEDCL:
        round_encoder = clone(server.global_encoder)
        for client in clients:
            try:
                vec, loss = _afedcl_client_round(client, round_encoder, config, flags)
            except Exception as exc:
                raise RoundError(f"round {round_index}: client {client.client_id} failed: {exc}") from exc
            uploads.append((client.client_id, vec, loss))
    else:
        global_vector = server_payload(server, config.method)
        for client in clients:
            try:
                vec = _baseline_client_round(client, global_vector, config)
            except Exception as exc:
                raise RoundError(f"round {round_index}: client {client.client_id} failed: {exc}") from exc
            uploads.append((client.client_id, vec, float(len(client.train_set))))

    return _complete_round(server, clients, uploads, config, flags, split)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def load_dataset(config) -> Dataset:
    if config.data_folder is not None:
        from .data import load_image_folder

        return load_image_folder(config.data_folder, config.folder_side)
    return synth_generate(config.synthetic)


def build_experiment(config):
    """Data, partition, split, and freshly initialized clients and server.

    All clients and the server start from one shared seeded initialization.
    Seeds are derived from the experiment seed: partition seed+1, train/test
    subsampling seed+2, model initialization seed+3, per-client batch
    shuffling from (seed, 4, client_id).
    """
    dataset = load_dataset(config)
    if dataset.input_dim != config.network.input_dim:
        raise ValueError(
            f"dataset width {dataset.input_dim} does not match network input "
            f"{config.network.input_dim}"
        )
    if dataset.num_classes != config.network.num_classes:
        raise ValueError("dataset and network disagree on the class count")

    if config.partition_scheme == "disjoint":
        part = partition_disjoint(dataset, config.num_clients, config.classes_per_client, config.seed + 1)
    elif config.partition_scheme == "dirichlet":
        part = partition_dirichlet(dataset, config.num_clients, config.dirichlet_alpha, config.seed + 1)
    else:
        raise ValueError(f"unknown partition scheme {config.partition_scheme!r}")
    split = subsample_train(dataset, config.train_per_client, part, config.seed + 2)

    encoder, classifier, discriminator = build_models(config.network, config.seed + 3)
    clients = []
    for k in range(config.num_clients):
        clients.append(
            ClientState(
                client_id=k,
                encoder=clone(encoder),
                classifier=clone(classifier),
                discriminator=clone(discriminator),
                fusion_weight=0.5,
                opt_encoder=make_optimizer(config.optimizer, config.learning_rate, param_count(encoder)),
                opt_classifier=make_optimizer(config.optimizer, config.learning_rate, param_count(classifier)),
                opt_discriminator=make_optimizer(config.optimizer, config.learning_rate, param_count(discriminator)),
                opt_fusion=make_optimizer(config.optimizer, config.learning_rate, 1),
                train_set=split.train[k],
                rng=np.random.default_rng([config.seed, 4, k]),
            )
        )
    flags = config.flags
    mode = "consensus_aware" if config.method == AFEDCL and flags.enable_caa else "sample_weighted"
    server = ServerState(
        global_encoder=clone(encoder),
        roster=[c.client_id for c in clients],
        aggregation_mode=mode,
        global_classifier=clone(classifier) if config.method in (FEDAVG, FEDPROX) else None,
    )
    return server, clients, split


def loopback_session(clients: list[ClientState], config, flags: AblationFlags):
    """In-process connections driving the given clients; (connections, cleanup)."""
    from . import transport

    connections = [
        transport.LoopbackConnection(c.client_id, make_round_handler(c, config, flags))
        for c in sorted(clients, key=lambda c: c.client_id)
    ]
    return connections, lambda: None


def tcp_session(clients: list[ClientState], config, flags: AblationFlags, host="127.0.0.1", port=0):
    """Real sockets: one thread per client, server-side connections returned.

    port 0 picks an ephemeral port. The cleanup closes the connections (which
    ends the client loops at end-of-stream) and joins the threads.
    """
    import socket
    import threading

    from . import transport

    listener = socket.create_server((host, port))
    actual_port = listener.getsockname()[1]
    threads = []
    for client in sorted(clients, key=lambda c: c.client_id):
        handler = make_round_handler(client, config, flags)
        thread = threading.Thread(
            target=transport.run_tcp_client,
            args=(host, actual_port, client.client_id, handler),
            daemon=True,
        )
        thread.start()
        threads.append(thread)
    connections = transport.accept_clients(listener, len(clients))

    def cleanup():
        for conn in connections:
            conn.close()
        listener.close()
        for thread in threads:
            thread.join(timeout=30)

    return connections, cleanup


def run_experiment(config, session_factory=None) -> ExperimentResult:
    """Run the configured number of rounds; round 0 reports the initialization.

    session_factory(clients, config, flags) -> (connections, cleanup) routes
    the rounds through a transport backend (loopback_session or tcp_session);
    the default is direct calls. All backends produce bit-identical results
    because parameters cross the wire as exact f64 and aggregation always
    happens in client-id order.
    """
    flags = config.flags
    server, clients, split = build_experiment(config)
    reports = [
        RoundReport(0, _build_rows(server, clients, config, flags, split, 0, server.global_encoder, None))
    ]

    if config.method == LOCAL_ONLY:
        if session_factory is not None:
            raise ValueError("local_only does not communicate")
        epochs = config.dcc_epochs + config.aff_epochs
        for _ in range(config.rounds):
            round_index = server.round_index
            for client in clients:
                try:
                    fedavg_local_update(client, epochs)
                except Exception as exc:
                    raise RoundError(
                        f"round {round_index}: client {client.client_id} failed: {exc}"
                    ) from exc
            server.round_index = round_index + 1
            reports.append(
                RoundReport(round_index, _build_rows(server, clients, config, flags, split, round_index, None, None))
            )
    elif session_factory is None:
        for _ in range(config.rounds):
            reports.append(run_round(server, clients, config, flags, split))
    else:
        from . import transport

        connections, cleanup = session_factory(clients, config, flags)
        try:
            for _ in range(config.rounds):
                round_index = server.round_index
                results = transport.server_round_broadcast_and_collect(
                    connections, round_index, server_payload(server, config.method)
                )
                report = _complete_round(server, clients, results, config, flags, split)
                transport.broadcast_round_done(connections, round_index)
                reports.append(report)
        finally:
            cleanup()

    return ExperimentResult(server, clients, reports, split)
