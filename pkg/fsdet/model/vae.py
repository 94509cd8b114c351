# Copyright (c) 2024, The FSDet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Class-agnostic variational encoder / decoder over support features and its losses."""

from typing import Sequence

import torch
import torch.nn.functional as F

from .types import (
    DETERMINISTIC,
    EVAL,
    SAMPLED,
    TRAIN,
    ClassDistribution,
    SupportFeature,
    VariationalFeature,
)


def _mlp(in_dim, hidden_dim, n_layers, negative_slope=0.2):
    layers = []
    for i in range(n_layers):
        layers += [
            torch.nn.Linear(in_dim if i == 0 else hidden_dim, hidden_dim),
            torch.nn.LeakyReLU(negative_slope),
        ]
    return torch.nn.Sequential(*layers)


class VAEEncoder(torch.nn.Module):
    """Hidden layers followed by parallel mu and log sigma^2 heads."""

    def __init__(self, feature_dim, hidden_dim, latent_dim, n_hidden_layers=1, log_var_clamp=10.0):
        super().__init__()
        self.hidden = _mlp(feature_dim, hidden_dim, n_hidden_layers)
        self.mu = torch.nn.Linear(hidden_dim, latent_dim)
        self.log_var = torch.nn.Linear(hidden_dim, latent_dim)
        self.log_var_clamp = log_var_clamp

    def forward(self, x):
        h = self.hidden(x)
        log_var = self.log_var(h).clamp(-self.log_var_clamp, self.log_var_clamp)
        return self.mu(h), log_var


class VAEDecoder(torch.nn.Module):
    def __init__(self, latent_dim, hidden_dim, feature_dim, n_hidden_layers=1):
        super().__init__()
        self.hidden = _mlp(latent_dim, hidden_dim, n_hidden_layers)
        self.out = torch.nn.Linear(hidden_dim, feature_dim)

    def forward(self, z):
        return self.out(self.hidden(z))


class FeatureVAE(torch.nn.Module):
    def __init__(self, feature_dim, hidden_dim, latent_dim, n_hidden_layers=1, log_var_clamp=10.0):
        super().__init__()
        self.encoder = VAEEncoder(feature_dim, hidden_dim, latent_dim, n_hidden_layers, log_var_clamp)
        self.decoder = VAEDecoder(latent_dim, hidden_dim, feature_dim, n_hidden_layers)

    @classmethod
    def from_args(cls, args):
        return cls(
            feature_dim=args.feature_dim,
            hidden_dim=args.vae_hidden_dim,
            latent_dim=args.vae_latent_dim,
            n_hidden_layers=args.vae_hidden_layers,
            log_var_clamp=args.log_var_clamp,
        )

    def encode(self, support: torch.Tensor, class_id=None) -> ClassDistribution:
        mu, log_var = self.encoder(support)
        return ClassDistribution(mu=mu, log_var=log_var, class_id=class_id)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


def vae_encode(vae: FeatureVAE, s: SupportFeature) -> ClassDistribution:
    return vae.encode(s.vector, s.class_id)


def reparameterize(dist: ClassDistribution, mode=TRAIN, generator=None) -> VariationalFeature:
    """TRAIN: z = mu + sigma * eps with eps ~ N(0, I). EVAL: z = mu + sigma."""
    sigma = dist.sigma
    if mode == TRAIN:
        epsilon = torch.randn(
            dist.mu.shape, generator=generator, dtype=dist.mu.dtype
        ).to(dist.mu.device)
        return VariationalFeature(
            vector=dist.mu + sigma * epsilon,
            source_class=dist.class_id,
            mode=SAMPLED,
            epsilon=epsilon,
        )
    elif mode == EVAL:
        return VariationalFeature(
            vector=dist.mu + sigma, source_class=dist.class_id, mode=DETERMINISTIC
        )
    else:
        raise ValueError(f"mode {mode} not recognized")


def vae_decode(vae: FeatureVAE, z: VariationalFeature) -> torch.Tensor:
    return vae.decode(z.vector)


def rec_loss(s: torch.Tensor, s_prime: torch.Tensor) -> torch.Tensor:
    """Mean squared error over dimensions (and rows)."""
    return F.mse_loss(s_prime, s, reduction="mean")


def kl_loss(dist: ClassDistribution) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)), summed over dimensions, averaged over rows."""
    kl = 0.5 * (dist.mu.pow(2) + dist.log_var.exp() - dist.log_var - 1.0).sum(dim=-1)
    return kl.mean()


def consistency_loss(s_prime: torch.Tensor, class_id, classifier: torch.nn.Module) -> torch.Tensor:
    """Cross-entropy of classifier(S') against class positions in 0..n_classes-1."""
    logits = classifier(s_prime if s_prime.dim() > 1 else s_prime[None])
    target = torch.as_tensor(class_id, dtype=torch.int64, device=logits.device).reshape(-1)
    n_classes = logits.shape[-1]
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= n_classes):
        raise ValueError(
            f"class index {target.tolist()} out of range for a {n_classes}-way consistency classifier"
        )
    return F.cross_entropy(logits, target)


def test_time_class_distribution(
    supports: Sequence[SupportFeature], vae: FeatureVAE
) -> ClassDistribution:
    """Encodes the mean of the K support features of one class."""
    if len(supports) == 0:
        raise ValueError("at least one support feature is required")
    class_ids = {int(s.class_id) for s in supports}
    if len(class_ids) != 1:
        raise ValueError(f"supports of one class expected, got classes {sorted(class_ids)}")
    mean = torch.stack([s.vector for s in supports]).mean(dim=0)
    return vae.encode(mean, class_ids.pop())
