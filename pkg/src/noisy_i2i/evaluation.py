"""Metric procedures over a trained generator.

The evaluation classifier is trained on clean labels, independently of any
translation model, and doubles as the embedding extractor for FID and KID.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import metrics
from .datasets import LabeledDataset, augment_hflip
from .errors import InvalidInputError, LifecycleError
from .networks import EvalClassifier


def train_eval_classifier(train: LabeledDataset, num_domains: int, epochs: int = 8, batch_size: int = 32,
                          lr: float = 1e-3, seed: int = 0, width: int = 16) -> EvalClassifier:
    """Fit the evaluation CNN on clean labels. Leaves the global RNG untouched."""
    labels = train.clean_labels
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = torch.Generator().manual_seed(seed)
        model = EvalClassifier(train.images.shape[-1], train.images.shape[1], num_domains, width)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        for _ in range(epochs):
            order = torch.randperm(len(train), generator=gen)
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                x = augment_hflip(train.images[idx], gen)
                loss = F.cross_entropy(model(x), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    model.eval()
    model.trained = True
    return model


def _require_trained(eval_cls: EvalClassifier) -> None:
    if not getattr(eval_cls, "trained", False):
        raise LifecycleError("evaluation classifier has not been trained")


@torch.no_grad()
def predict(model, images: Tensor, batch_size: int = 256) -> Tensor:
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


@torch.no_grad()
def embed(eval_cls: EvalClassifier, images: Tensor, batch_size: int = 256) -> np.ndarray:
    _require_trained(eval_cls)
    parts = [eval_cls.embed(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(parts).double().numpy()


def other_domain_targets(labels: Tensor, num_domains: int, generator: torch.Generator) -> Tensor:
    """Uniform draw over the ``c - 1`` domains different from each label."""
    offset = torch.randint(1, num_domains, labels.shape, generator=generator)
    return (labels + offset) % num_domains


@torch.no_grad()
def translate(G, images: Tensor, targets: Tensor, batch_size: int = 128) -> Tensor:
    was_training = G.training
    G.eval()
    try:
        return torch.cat([G(images[i:i + batch_size], targets[i:i + batch_size])
                          for i in range(0, len(images), batch_size)])
    finally:
        G.train(was_training)


def classification_accuracy(eval_cls: EvalClassifier, G, images: Tensor, labels: Tensor,
                            num_domains: int, generator: torch.Generator) -> float:
    """Percent of test images translated to a different domain that land in it."""
    _require_trained(eval_cls)
    targets = other_domain_targets(labels, num_domains, generator)
    pred = predict(eval_cls, translate(G, images, targets)).argmax(dim=1)
    return 100.0 * (pred == targets).double().mean().item()


class Evaluator:
    """Holds the fixed evaluation data and computes metric reports."""

    def __init__(self, eval_cls: EvalClassifier, train: LabeledDataset, test: LabeledDataset, num_domains: int,
                 kid_splits: int = metrics.KID_SPLITS, kid_split_size: int = metrics.KID_SPLIT_SIZE):
        _require_trained(eval_cls)
        if not test.expose_clean:
            raise InvalidInputError("evaluation needs a test view that exposes clean labels")
        self.eval_cls = eval_cls
        self.num_domains = num_domains
        self.test_images = test.images
        self.test_labels = test.clean_labels
        self.real = metrics.EmbeddingSet(embed(eval_cls, train.images), "real-train")
        self.kid_splits = kid_splits
        self.kid_split_size = min(kid_split_size, len(test))

    def evaluate(self, G, epoch: int, seed: int) -> metrics.MetricsReport:
        gen = torch.Generator().manual_seed(seed)
        ca = classification_accuracy(self.eval_cls, G, self.test_images, self.test_labels, self.num_domains, gen)
        # FID set: every test image translated with the label of another test image
        perm = torch.randperm(len(self.test_labels), generator=gen)
        fakes = translate(G, self.test_images, self.test_labels[perm])
        gen_set = metrics.EmbeddingSet(embed(self.eval_cls, fakes))
        probs = torch.softmax(predict(self.eval_cls, fakes).double(), dim=1).numpy()
        kid_mean, kid_values = metrics.kid(self.real, gen_set, self.kid_splits, self.kid_split_size,
                                           np.random.default_rng(seed))
        return metrics.MetricsReport(
            epoch=epoch,
            ca=ca,
            fid=metrics.fid(self.real, gen_set),
            is_score=metrics.inception_score(probs),
            kid=kid_mean,
            kid_splits=kid_values.tolist(),
        )

    @torch.no_grad()
    def classifier_accuracy(self, classify) -> float:
        """Percent of real test images a (D/C) classifier labels correctly."""
        pred = torch.cat([classify(self.test_images[i:i + 256]) for i in range(0, len(self.test_images), 256)])
        return 100.0 * (pred.argmax(dim=1) == self.test_labels).double().mean().item()
