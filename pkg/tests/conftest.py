import numpy as np

from hicolora.cluster import JointClusterModel
from hicolora.embed import unit
from hicolora.model import EncoderConfig, ModelParams, PromptBundle, build_model, prompt_attend
from hicolora.numkit import RngStream


def make_clusters(dim, m, n, seed=0):
    rng = RngStream(seed)
    return JointClusterModel(
        domain_names=[f"dom{i}" for i in range(m + 1)],
        slot_keys=[f"slot{i}" for i in range(n + 1)],
        domain_labels=np.arange(m + 1) % m,
        slot_labels=np.arange(n + 1) % n,
        domain_centroids=np.stack([unit(rng.normal(size=dim)) for _ in range(m)]),
        slot_centroids=np.stack([unit(rng.normal(size=dim)) for _ in range(n)]),
        m=m,
        n=n,
        silhouette_by_k={},
        dim=dim,
    )


def tiny_model(
    d=8,
    layers=2,
    heads=2,
    ffn=16,
    r=2,
    vocab=20,
    num_classes=5,
    m=2,
    n=2,
    strategy="semsvd",
    seed=0,
    alpha=0.5,
    **kwargs,
) -> ModelParams:
    cfg = EncoderConfig(
        num_layers=layers,
        hidden_dim=d,
        heads=heads,
        ffn_dim=ffn,
        vocab_size=vocab,
        rank=r,
        alpha=alpha,
        max_seq_len=32,
        **{k: v for k, v in kwargs.items() if k in EncoderConfig.__dataclass_fields__},
    )
    clusters = make_clusters(d, m, n, seed=seed + 1)
    build_kwargs = {k: v for k, v in kwargs.items() if k not in EncoderConfig.__dataclass_fields__}
    return build_model(
        cfg,
        clusters,
        num_classes=num_classes,
        class_labels=[f"v{i}" for i in range(num_classes - 1)] + ["none"],
        rng=RngStream(seed),
        init_strategy=strategy,
        **build_kwargs,
    )


def fresh_bundle(model: ModelParams, seed=0, terms=3, descs=4) -> PromptBundle:
    rng = RngStream(seed)
    d = model.config.hidden_dim
    bundle = PromptBundle(
        term_vectors=np.stack([unit(rng.normal(size=d)) for _ in range(terms)]),
        description_vectors=np.stack([unit(rng.normal(size=d)) for _ in range(descs)]),
    )
    prompt_attend(bundle, model.config.heads)
    return bundle
