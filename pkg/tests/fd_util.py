"""Central finite differences over every parameter of tiny double-precision networks."""

import torch

from noisy_i2i import losses as L
from noisy_i2i.losses import GanObjective
from noisy_i2i.networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig
from noisy_i2i.noise import build_symmetric
from noisy_i2i.robust import forward_corrected_loss


def tiny_setup(seed=0):
    torch.manual_seed(seed)
    G = Generator(GeneratorConfig(8, 3, 3, base_width=4, num_res_blocks=1, kernel_size=3)).double()
    D = Discriminator(DiscriminatorConfig(8, 3, 3, base_width=4, num_layers=2)).double().eval()
    D2 = Discriminator(DiscriminatorConfig(8, 3, 3, base_width=4, num_layers=2, with_classifier=False)).double().eval()
    g = torch.Generator().manual_seed(seed)
    x = (torch.rand(4, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1)
    y = torch.randint(0, 3, (4,), generator=g)
    y1 = torch.randint(0, 3, (4,), generator=g)
    y2 = torch.randint(0, 3, (4,), generator=g)
    return G, D, D2, x, y, y1, y2


def loss_terms(G, D, D2, x, y, y1, y2):
    """name -> zero-argument closure computing that scalar loss."""
    C = D.classify
    T = build_symmetric(3, 0.4)

    def seeded():
        return torch.Generator().manual_seed(7)

    return {
        "adv_d vanilla": lambda: L.discriminator_adv(D, x, G(x, y1), GanObjective.VANILLA),
        "adv_g vanilla": lambda: L.generator_adv(D, G(x, y1), GanObjective.VANILLA),
        "adv_d wgan-gp": lambda: L.discriminator_adv(D, x, G(x, y1), GanObjective.WGAN_GP, 10.0, seeded()),
        "adv_g wgan": lambda: L.generator_adv(D, G(x, y1), GanObjective.WGAN_GP),
        "cls real": lambda: L.cls_real_loss(C, x, y),
        "cls fake": lambda: L.cls_fake_loss(C, G, x, y1),
        "cycle": lambda: L.cycle_loss(G, x, y, y1),
        "virtual cycle": lambda: L.virtual_cycle_loss(G, x, y1, y2),
        "relabeled cycle": lambda: L.relabeled_cycle_loss(G, C, x, y1, "sample", seeded()),
        "mixed cyc/vcyc": lambda: L.mixed_cycle_loss("cyc", 0.3, G, x, y, y1, y2),
        "mixed recyc/vcyc": lambda: L.mixed_cycle_loss("recyc", 0.6, G, x, None, y1, y2, C, "sample", seeded()),
        "second adv d": lambda: L.second_adv_loss(D2, G, x, y1, y2, GanObjective.WGAN_GP, 10.0, seeded())[0],
        "second adv g": lambda: L.second_adv_loss(D2, G, x, y1, y2, GanObjective.VANILLA)[1],
        "identity": lambda: L.identity_loss(G, x, y),
        "forward corrected": lambda: forward_corrected_loss(C(x), y, T),
        "gradient penalty": lambda: L.gradient_penalty(D, x, G(x, y1).detach(), generator=seeded()),
    }


def directional_check(fn, params, seed=0, h=1e-6, directions=3):
    """Worst relative error between autograd and central differences along random directions."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    value = fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(directions):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
        plus = fn().item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
        minus = fn().item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (plus - minus) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def check_all(seed=0):
    G, D, D2, x, y, y1, y2 = tiny_setup(seed)
    params = list(G.parameters()) + list(D.parameters()) + list(D2.parameters())
    return {name: directional_check(fn, params, seed) for name, fn in loss_terms(G, D, D2, x, y, y1, y2).items()}
