import numpy as np
import pytest

from aafkit.augmentation import BoundingBox
from aafkit.support_extraction import (
    STRATEGIES,
    ExtractionStrategy,
    SupportExtractor,
    default_patch,
    extract_support,
    same_size_patch,
)


@pytest.fixture
def image(rng):
    return rng.random((3, 300, 300))


class TestSameSize:
    def test_wide_box_is_letterboxed(self, image):
        (p,) = extract_support(image, BoundingBox(10, 20, 74, 52), ExtractionStrategy("same_size", 128))
        assert p.object_region == (0.0, 32.0, 128.0, 96.0)
        assert not p.image[:, :32].any() and not p.image[:, 96:].any()
        assert p.image[:, 32:96].any()

    @pytest.mark.parametrize("size", range(8, 257, 8))
    def test_aspect_ratio(self, image, rng, size):
        bw = size
        bh = max(1, int(size * rng.uniform(0.25, 1.0)))
        box = BoundingBox(0, 0, min(bw, 300), min(bh, 300))
        _, (x0, y0, x1, y1) = same_size_patch(image, box, 128)
        expected = 128 * box.height / box.width
        assert max(x1 - x0, y1 - y0) == 128
        assert abs((y1 - y0) - expected) <= 1


class TestDefault:
    def test_small_box_is_exact_crop(self, image):
        patch, region = default_patch(image, BoundingBox(100, 100, 110, 110), 64)
        assert patch.tobytes() == image[:, 73:137, 73:137].tobytes()
        assert region == (27.0, 27.0, 37.0, 37.0)

    def test_large_box_is_scaled(self, image):
        patch, region = default_patch(image, BoundingBox(0, 0, 256, 128), 128)
        assert patch.shape == (3, 128, 128)
        assert region[2] - region[0] == pytest.approx(128)

    def test_zero_outside_image(self, image):
        patch, _ = default_patch(image, BoundingBox(0, 0, 10, 10), 64)
        assert not patch[:, :27, :27].any()


class TestContextVariants:
    def test_context_padding_full_box_equals_default(self, image):
        box = BoundingBox(50, 50, 178, 178)
        a = extract_support(image, box, ExtractionStrategy("default", 128))[0].image
        b = extract_support(image, box, ExtractionStrategy("context_padding", 128))[0].image
        assert a.tobytes() == b.tobytes()

    def test_context_padding_zeroes_context(self, image):
        p = extract_support(image, BoundingBox(100, 100, 120, 120), ExtractionStrategy("context_padding", 64))[0]
        assert not p.image[:, :22].any() and not p.image[:, 42:].any()
        assert p.image[:, 22:42, 22:42].all()

    def test_reflection_mirrors_object(self, image):
        p = extract_support(image, BoundingBox(100, 100, 120, 120), ExtractionStrategy("reflection", 64))[0]
        core = p.image[:, 22:42, 22:42]
        assert core.tobytes() == image[:, 100:120, 100:120].tobytes()
        np.testing.assert_array_equal(p.image[:, 22:42, 21], core[:, :, 0])


class TestMultiscale:
    def test_three_patches(self, image):
        patches = extract_support(image, BoundingBox(100, 100, 140, 120), ExtractionStrategy("multiscale", 128))
        assert [p.scale_index for p in patches] == [0, 1, 2]
        for p, target in zip(patches, (32, 64, 128)):
            x0, _, x1, _ = p.object_region
            assert x1 - x0 == pytest.approx(target)
            assert p.image.shape == (3, 128, 128)


class TestMixed:
    @pytest.mark.parametrize("side", list(range(8, 257, 4)))
    def test_branch_equivalence(self, image, side):
        box = BoundingBox(20, 30, 20 + side, 30 + max(side // 2, 1)) if side + 20 <= 300 else BoundingBox(0, 0, 256, 128)
        mixed = extract_support(image, box, ExtractionStrategy("mixed", 128))[0]
        small = np.sqrt(box.width * box.height) < 32
        ref = extract_support(image, box, ExtractionStrategy("default" if small else "same_size", 128))[0]
        assert mixed.image.tobytes() == ref.image.tobytes()

    def test_threshold(self, image):
        below = extract_support(image, BoundingBox(0, 0, 20, 20), "mixed")[0]
        assert below.image.tobytes() == default_patch(image, BoundingBox(0, 0, 20, 20), 128)[0].tobytes()
        at = extract_support(image, BoundingBox(0, 0, 32, 32), "mixed")[0]
        assert at.image.tobytes() == same_size_patch(image, BoundingBox(0, 0, 32, 32), 128)[0].tobytes()


class TestApi:
    @pytest.mark.parametrize("kind", STRATEGIES)
    def test_patch_sizes(self, image, kind):
        for p in extract_support(image, BoundingBox(5, 5, 45, 25), ExtractionStrategy(kind, 96)):
            assert p.image.shape == (3, 96, 96)

    def test_errors(self, image):
        with pytest.raises(ValueError):
            ExtractionStrategy("crop")
        with pytest.raises(ValueError):
            extract_support(image, BoundingBox(250, 250, 350, 350))

    def test_estimator(self, image):
        ext = SupportExtractor(strategy="multiscale", patch_size=32).fit()
        out = ext.transform([(image, BoundingBox(0, 0, 10, 10)), (image, BoundingBox(5, 5, 50, 50))])
        assert out.shape == (6, 3, 32, 32)
        assert ext.get_params() == {"strategy": "multiscale", "patch_size": 32}
