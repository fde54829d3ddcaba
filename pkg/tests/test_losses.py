"""Loss-function contracts: frozen scalar examples, brute-force oracle
equivalence, non-negativity, mode separation, and the gradient check."""

import math

import pytest
import torch

import _naive as naive
from purifier.errors import NonFiniteLossError, ValidationError
from purifier.features import ClassCenters, ClassFeatureSet, class_centers
from purifier.losses import (
    LossParts,
    LossWeights,
    class_aware_losses,
    feature_losses,
    gan_losses,
    pixel_losses,
    total_generator_loss,
)
from purifier.models import SmallConvNet, freeze

REL_TOL = 1e-6


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


class IdentityExtractor:
    def __call__(self, x):
        return [x]


class ConstantDisc:
    """Single-scale discriminator stub: constant score, identity tap."""

    def __init__(self, value):
        self.value = value

    def __call__(self, x):
        return [torch.full((x.shape[0], 1, 2, 2), self.value)], [x]


# ---------------------------------------------------------------------------
# Frozen scalar examples
# ---------------------------------------------------------------------------


def test_pixel_losses_perfect_reconstruction():
    clean = torch.rand(2, 3, 4, 4)
    recon, perceptual = pixel_losses(clean, clean, clean, IdentityExtractor(), mode="ours")
    assert float(recon) == 0.0
    assert float(perceptual) == 0.0


def test_pixel_losses_scalar_example():
    pc = torch.full((1, 1, 1, 1), 0.5)
    c = torch.zeros(1, 1, 1, 1)
    pa = torch.full((1, 1, 1, 1), 0.4)
    recon_ours, _ = pixel_losses(pc, c, pa, IdentityExtractor(), mode="ours")
    recon_trad, _ = pixel_losses(pc, c, pa, IdentityExtractor(), mode="traditional")
    assert rel_err(float(recon_ours), 0.6) < REL_TOL
    assert rel_err(float(recon_trad), 0.9) < REL_TOL


def test_pixel_losses_shape_mismatch():
    with pytest.raises(ValidationError):
        pixel_losses(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4), torch.rand(1, 3, 2, 2),
                     IdentityExtractor())


def test_gan_losses_constant_half():
    gan_d, gan_g, _ = gan_losses(ConstantDisc(0.5), torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4))
    assert rel_err(float(gan_d), 0.5) < REL_TOL
    assert rel_err(float(gan_g), 0.25) < REL_TOL


def test_gan_losses_perfect_discriminator():
    class PerfectDisc:
        def __call__(self, x):
            value = 1.0 if float(x[0, 0, 0, 0]) > 0.5 else 0.0
            return [torch.full((x.shape[0], 1, 2, 2), value)], [x]

    pc = torch.full((2, 3, 4, 4), 0.9)
    pa = torch.full((2, 3, 4, 4), 0.1)
    gan_d, _, _ = gan_losses(PerfectDisc(), pc, pa)
    assert float(gan_d) == 0.0


def test_gan_losses_identical_inputs_zero_feature_match():
    x = torch.rand(2, 3, 4, 4)
    _, _, fm = gan_losses(ConstantDisc(0.3), x, x.clone())
    assert float(fm) == 0.0


def test_gan_losses_traditional_requires_clean():
    with pytest.raises(ValidationError):
        gan_losses(ConstantDisc(0.5), torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4),
                   mode="traditional")


def test_feature_losses_identical_inputs():
    torch.manual_seed(0)
    model = SmallConvNet(num_classes=4, base_channels=8, feature_dim=16)
    freeze(model)
    x = torch.rand(3, 3, 32, 32)
    y = torch.randint(0, 4, (3,))
    _, feature_recon = feature_losses(model, x, x.clone(), x.clone(), y, mode="ours")
    assert float(feature_recon) == 0.0


def test_feature_recon_scalar_example():
    feats_clean = [[0.0, 0.0]]
    feats_pc = [[1.0, 1.0]]
    feats_pa = [[2.0, 0.0]]
    assert rel_err(naive.feature_recon_loss(feats_pc, feats_pa, feats_clean, "ours"), 2.0) < REL_TOL
    from purifier._util import mean_l1
    got = mean_l1(torch.tensor(feats_pc), torch.tensor(feats_clean)) \
        + mean_l1(torch.tensor(feats_pa), torch.tensor(feats_clean))
    assert rel_err(float(got), 2.0) < REL_TOL


def test_task_loss_zero_for_perfect_model():
    # logits extreme enough that the softmax is numerically one-hot
    logits = torch.tensor([[100.0, 0.0], [0.0, 100.0]])
    labels = torch.tensor([0, 1])
    from purifier.losses import task_loss
    assert float(task_loss(logits, labels, "classification")) < 1e-6


def test_class_aware_scalar_examples():
    weights = LossWeights(margin=10.0, inter_mode="literal")

    # aligned singleton clusters
    centers = ClassCenters({0: torch.tensor([1.0, 2.0]), 1: torch.tensor([3.0, 4.0])}, {0: 1, 1: 1})
    feats = ClassFeatureSet({0: torch.tensor([[1.0, 2.0]]), 1: torch.tensor([[3.0, 4.0]])}, 2, 2)
    align, intra, inter, _ = class_aware_losses(centers, feats, class_centers(feats), weights)
    assert float(align) == 0.0
    assert float(intra) == 0.0

    # mean-L1 center example
    clean = ClassCenters({0: torch.tensor([1.0, 0.0])}, {0: 2})
    adv = ClassFeatureSet({0: torch.tensor([[1.0, 2.0]])}, 1, 2)
    align, _, _, _ = class_aware_losses(clean, adv, class_centers(adv), weights)
    assert rel_err(float(align), 1.0) < REL_TOL

    # ordered-pair inter-class example: centers (0,0) and (4,0), M=10
    clean2 = ClassCenters({0: torch.zeros(2), 1: torch.tensor([4.0, 0.0])}, {0: 1, 1: 1})
    adv2 = ClassFeatureSet({0: torch.zeros(1, 2), 1: torch.tensor([[4.0, 0.0]])}, 2, 2)
    _, _, inter2, _ = class_aware_losses(clean2, adv2, class_centers(adv2), weights)
    assert rel_err(float(inter2), 16.0) < REL_TOL


def test_class_aware_zero_overlap_warns():
    weights = LossWeights()
    clean = ClassCenters({0: torch.zeros(2)}, {0: 1})
    adv = ClassFeatureSet({1: torch.ones(1, 2)}, 1, 2)
    with pytest.warns(UserWarning):
        align, intra, inter, total = class_aware_losses(clean, adv, class_centers(adv), weights)
    for value in (align, intra, inter, total):
        assert float(value) == 0.0 and math.isfinite(float(value))


def test_class_total_weighting():
    weights = LossWeights(margin=5.0, inter_mode="literal")
    clean = ClassCenters({0: torch.zeros(2), 1: torch.ones(2)}, {0: 1, 1: 1})
    adv = ClassFeatureSet({0: torch.rand(3, 2), 1: torch.rand(2, 2)}, 5, 2)
    align, intra, inter, total = class_aware_losses(clean, adv, class_centers(adv), weights)
    expected = weights.lambda1 * float(align) + weights.lambda2 * float(inter) + weights.lambda3 * float(intra)
    assert rel_err(float(total), expected) < REL_TOL


def test_total_loss_zero_and_paper_weights():
    weights = LossWeights()
    assert float(total_generator_loss(LossParts(), weights)) == 0.0
    ones = LossParts(**{f: 1.0 for f in LossParts().to_dict()})
    assert rel_err(float(total_generator_loss(ones, weights)), 301.105) < REL_TOL


def test_total_loss_lambda4_linearity():
    parts = LossParts(recon=0.3, perceptual=0.2, feature_match=0.1, gan_g=0.4,
                      task=0.25, feature_recon=0.15)
    base = LossWeights()
    doubled = LossWeights(lambda4=base.lambda4 * 2)
    assert rel_err(float(total_generator_loss(parts, doubled)),
                   2 * float(total_generator_loss(parts, base))) < REL_TOL


def test_total_loss_non_finite_diagnostic():
    parts = LossParts(recon=float("nan"))
    with pytest.raises(NonFiniteLossError, match="recon"):
        total_generator_loss(parts, LossWeights())
    parts = LossParts(inter_class=float("inf"))
    with pytest.raises(NonFiniteLossError, match="inter_class"):
        total_generator_loss(parts, LossWeights())


# ---------------------------------------------------------------------------
# Brute-force oracle equivalence (100 random cases per op)
# ---------------------------------------------------------------------------


def test_pixel_losses_match_oracle(tiny_extractor):
    gen = torch.Generator().manual_seed(7)
    for case in range(100):
        mode = "ours" if case % 2 == 0 else "traditional"
        shape = (2, 3, 8, 8)
        pc, c, pa = (torch.rand(shape, generator=gen) for _ in range(3))
        recon, perceptual = pixel_losses(pc, c, pa, tiny_extractor, mode=mode)
        assert rel_err(float(recon), naive.recon_loss(pc, c, pa, mode)) < REL_TOL
        with torch.no_grad():
            feats = [tiny_extractor(t) for t in (pc, c, pa)]
        expected_p = naive.perceptual_loss(*feats, mode)
        assert rel_err(float(perceptual), expected_p) < REL_TOL


def test_gan_losses_match_oracle(tiny_discriminator):
    gen = torch.Generator().manual_seed(8)
    for case in range(100):
        mode = "ours" if case % 2 == 0 else "traditional"
        pc, pa, c = (torch.rand(2, 3, 16, 16, generator=gen) for _ in range(3))
        with torch.no_grad():
            gan_d, gan_g, fm = gan_losses(tiny_discriminator, pc, pa, mode=mode, clean=c)
            s_pc, t_pc = tiny_discriminator(pc)
            s_pa, t_pa = tiny_discriminator(pa)
            s_c, t_c = tiny_discriminator(c)
        exp_d, exp_g = naive.lsgan_losses(s_pc, s_pa, mode, s_c)
        exp_fm = naive.feature_match_loss(t_pc, t_pa, mode, t_c)
        assert rel_err(float(gan_d), exp_d) < REL_TOL
        assert rel_err(float(gan_g), exp_g) < REL_TOL
        assert rel_err(float(fm), exp_fm) < REL_TOL


def test_feature_losses_match_oracle(tiny_classifier):
    freeze(tiny_classifier)
    gen = torch.Generator().manual_seed(9)
    from purifier.models import target_forward
    for case in range(100):
        mode = "ours" if case % 2 == 0 else "abla_feature_I"
        pc, pa, c = (torch.rand(2, 3, 32, 32, generator=gen) for _ in range(3))
        y = torch.randint(0, 4, (2,), generator=gen)
        task, feature_recon = feature_losses(tiny_classifier, pc, pa, c, y, mode=mode)
        with torch.no_grad():
            out_pc, f_pc = target_forward(tiny_classifier, pc)
            out_pa, f_pa = target_forward(tiny_classifier, pa)
            _, f_c = target_forward(tiny_classifier, c)
        exp_task = naive.cross_entropy(out_pc.numpy(), y.tolist()) + naive.cross_entropy(out_pa.numpy(), y.tolist())
        exp_rec = naive.feature_recon_loss(f_pc.numpy(), f_pa.numpy(), f_c.numpy(), mode)
        assert rel_err(float(task), exp_task) < REL_TOL
        assert rel_err(float(feature_recon), exp_rec) < REL_TOL


def test_class_aware_losses_match_oracle():
    gen = torch.Generator().manual_seed(10)
    for case in range(100):
        inter_mode = "hinge" if case % 2 == 0 else "literal"
        weights = LossWeights(margin=0.5 + float(torch.rand(1, generator=gen)) * 2, inter_mode=inter_mode)
        k_total, dim = 4, 5
        clean_buckets, adv_buckets = {}, {}
        for k in range(k_total):
            if int(torch.randint(0, 4, (1,), generator=gen)) == 0:
                continue  # class missing from this batch
            n_c = int(torch.randint(1, 4, (1,), generator=gen))
            n_a = int(torch.randint(1, 4, (1,), generator=gen))
            clean_buckets[k] = torch.randn(n_c, dim, generator=gen, dtype=torch.float64)
            adv_buckets[k] = torch.randn(n_a, dim, generator=gen, dtype=torch.float64)
        if not clean_buckets:
            clean_buckets[0] = torch.randn(2, dim, generator=gen, dtype=torch.float64)
            adv_buckets[0] = torch.randn(2, dim, generator=gen, dtype=torch.float64)
        clean_set = ClassFeatureSet(clean_buckets, sum(v.shape[0] for v in clean_buckets.values()), dim)
        adv_set = ClassFeatureSet(adv_buckets, sum(v.shape[0] for v in adv_buckets.values()), dim)
        clean_centers = class_centers(clean_set)
        adv_centers = class_centers(adv_set)
        align, intra, inter, total = class_aware_losses(clean_centers, adv_set, adv_centers, weights)

        naive_clean_centers = {k: naive.center_of(list(v.numpy())) for k, v in clean_buckets.items()}
        naive_adv_centers = {k: naive.center_of(list(v.numpy())) for k, v in adv_buckets.items()}
        naive_adv_buckets = {k: list(v.numpy()) for k, v in adv_buckets.items()}
        exp_align, exp_intra, exp_inter = naive.class_losses(
            naive_clean_centers, naive_adv_buckets, naive_adv_centers, weights.margin, inter_mode)
        assert rel_err(float(align), exp_align) < REL_TOL
        assert rel_err(float(intra), exp_intra) < REL_TOL
        assert abs(float(inter) - exp_inter) / max(abs(exp_inter), 1e-6) < REL_TOL


def test_total_loss_matches_oracle():
    gen = torch.Generator().manual_seed(11)
    names = list(LossParts().to_dict())
    for _ in range(100):
        values = {name: float(torch.rand(1, generator=gen)) * 3 for name in names}
        weights = LossWeights(
            lambda1=float(torch.rand(1, generator=gen)) + 0.05,
            lambda2=float(torch.rand(1, generator=gen)) + 0.05,
            lambda3=float(torch.rand(1, generator=gen)) + 0.05,
            lambda4=float(torch.rand(1, generator=gen)) * 50 + 0.05,
        )
        got = float(total_generator_loss(LossParts(**values), weights))
        expected = naive.total_loss(values, (weights.lambda1, weights.lambda2,
                                             weights.lambda3, weights.lambda4))
        assert rel_err(got, expected) < REL_TOL


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------


def test_non_negativity(tiny_extractor, tiny_discriminator, tiny_classifier):
    freeze(tiny_classifier)
    gen = torch.Generator().manual_seed(12)
    with torch.no_grad():
        for _ in range(20):
            pc, c, pa = (torch.rand(2, 3, 16, 16, generator=gen) for _ in range(3))
            recon, perceptual = pixel_losses(pc, c, pa, tiny_extractor)
            _, _, fm = gan_losses(tiny_discriminator, pc, pa)
            assert float(recon) >= 0 and float(perceptual) >= 0 and float(fm) >= 0
    weights = LossWeights(inter_mode="hinge")
    for _ in range(20):
        buckets = {k: torch.randn(3, 4, generator=gen) for k in range(3)}
        fs = ClassFeatureSet(buckets, 9, 4)
        centers = class_centers(fs)
        align, intra, inter, _ = class_aware_losses(centers, fs, centers, weights)
        assert float(align) >= 0 and float(intra) >= 0 and float(inter) >= 0


def test_mode_separation(tiny_extractor):
    """ours-mode and traditional-mode must differ when purified-clean differs
    from clean (guards the core pairing against silent collapse)."""
    gen = torch.Generator().manual_seed(13)
    pc, c, pa = (torch.rand(2, 3, 8, 8, generator=gen) for _ in range(3))
    ours, _ = pixel_losses(pc, c, pa, tiny_extractor, mode="ours")
    trad, _ = pixel_losses(pc, c, pa, tiny_extractor, mode="traditional")
    assert abs(float(ours) - float(trad)) > 1e-4


def test_gradient_check_total_loss(tiny_extractor, tiny_discriminator, tiny_classifier):
    """Analytic gradient of the full objective w.r.t. generator outputs vs
    central finite differences (h=1e-4), 10 random coordinates, <=1e-3."""
    import copy

    torch.manual_seed(21)
    model = copy.deepcopy(tiny_classifier).double()
    freeze(model)
    extractor = copy.deepcopy(tiny_extractor).double()
    disc = copy.deepcopy(tiny_discriminator).double()
    weights = LossWeights(inter_mode="literal")

    clean = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    labels = torch.randint(0, 4, (2,))
    purified_clean = torch.rand(2, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    purified_adv = torch.rand(2, 3, 32, 32, dtype=torch.float64, requires_grad=True)

    def objective(pc, pa):
        recon, perceptual = pixel_losses(pc, clean, pa, extractor)
        _, gan_g, fm = gan_losses(disc, pc, pa)
        task, frec = feature_losses(model, pc, pa, clean, labels)
        from purifier.features import group_by_class
        from purifier.models import target_forward
        _, feats_clean = target_forward(model, clean)
        _, feats_pa = target_forward(model, pa)
        clean_set = group_by_class(feats_clean, labels, "classification", 4)
        adv_set = group_by_class(feats_pa, labels, "classification", 4)
        align, intra, inter, _ = class_aware_losses(
            class_centers(clean_set), adv_set, class_centers(adv_set), weights)
        parts = LossParts(recon=recon, perceptual=perceptual, feature_match=fm, gan_g=gan_g,
                          task=task, feature_recon=frec, center_align=align,
                          inter_class=inter, intra_class=intra)
        return total_generator_loss(parts, weights)

    loss = objective(purified_clean, purified_adv)
    grad_pc, grad_pa = torch.autograd.grad(loss, (purified_clean, purified_adv))

    h = 1e-4
    rng = torch.Generator().manual_seed(3)
    for trial in range(10):
        use_pc = trial % 2 == 0
        field = purified_clean if use_pc else purified_adv
        grad = grad_pc if use_pc else grad_pa
        idx = tuple(int(torch.randint(0, s, (1,), generator=rng)) for s in field.shape)
        with torch.no_grad():
            bumped_plus = field.clone()
            bumped_plus[idx] += h
            bumped_minus = field.clone()
            bumped_minus[idx] -= h
            if use_pc:
                f_plus = objective(bumped_plus, purified_adv)
                f_minus = objective(bumped_minus, purified_adv)
            else:
                f_plus = objective(purified_clean, bumped_plus)
                f_minus = objective(purified_clean, bumped_minus)
        numeric = (float(f_plus) - float(f_minus)) / (2 * h)
        analytic = float(grad[idx])
        assert rel_err(analytic, numeric) <= 1e-3, (trial, analytic, numeric)
