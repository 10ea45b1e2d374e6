"""
Scene Service
Synthetic labeled scenes, the synthetic domain shift, target-like transfer and
the weak/strong augmentations used by the teacher and the student.
"""
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from app.core.constant import DomainTag
from app.core.exceptions import ParameterError
from app.schema.config import DomainShiftSpec, SceneSpec
from app.schema.detection import Annotation, BBox
from app.schema.scene import LabeledScene
from app.service.boxes import flip_boxes, iou_matrix
from app.service.fourier import fda_transfer

# Class-correlated base colours: box, disk, bar
CLASS_COLORS = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.90],
])

GRAY = 0.5


class Augmented(NamedTuple):
    image: np.ndarray
    flipped: bool


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.3, 0.6, size=3)
    texture = np.zeros((size, size))
    for _ in range(2):
        fx, fy = rng.uniform(0.05, 0.3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += 0.05 * np.sin(fx * xx + fy * yy + phase)
    image = base[None, None, :] + texture[:, :, None]
    image += rng.normal(0.0, 0.02, size=image.shape)
    return image


def _object_box(rng: np.random.Generator, class_id: int, spec: SceneSpec) -> Tuple[int, int]:
    s = int(rng.integers(spec.min_object_size, spec.max_object_size + 1))
    if class_id == 0:
        return int(max(2, round(s * rng.uniform(0.8, 1.0)))), int(max(2, round(s * rng.uniform(0.8, 1.0))))
    if class_id == 1:
        return s, s
    short = max(2, s // 3)
    return (s, short) if rng.random() < 0.5 else (short, s)


def _paint(image: np.ndarray, class_id: int, box: Tuple[int, int, int, int], color: np.ndarray):
    x, y, w, h = box
    if class_id == 1:
        yy, xx = np.mgrid[y:y + h, x:x + w].astype(np.float64)
        r = w / 2.0
        mask = (xx + 0.5 - (x + r)) ** 2 + (yy + 0.5 - (y + r)) ** 2 <= r * r
        region = image[y:y + h, x:x + w]
        region[mask] = color
    else:
        image[y:y + h, x:x + w] = color


def render_scene(rng: np.random.Generator, spec: SceneSpec) -> Tuple[np.ndarray, List[Annotation]]:
    size = spec.image_size
    image = _background(rng, size)
    boxes: List[Tuple[int, int, int, int]] = []
    labels: List[int] = []
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        for _attempt in range(50):
            class_id = int(rng.integers(0, spec.num_classes))
            w, h = _object_box(rng, class_id % 3, spec)
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            if boxes:
                overlap = iou_matrix(np.array([[x, y, w, h]]), np.array(boxes)).max()
                if overlap > spec.max_overlap_iou:
                    continue
            color = np.clip(CLASS_COLORS[class_id % 3] + rng.uniform(-0.1, 0.1, size=3), 0.0, 1.0)
            _paint(image, class_id % 3, (x, y, w, h), color)
            boxes.append((x, y, w, h))
            labels.append(class_id)
            break
    image = np.clip(image, 0.0, 1.0)
    if spec.channels == 1:
        image = image.mean(axis=2, keepdims=True)
    annotations = [
        Annotation(box=BBox(x=float(b[0]), y=float(b[1]), w=float(b[2]), h=float(b[3])), class_id=c)
        for b, c in zip(boxes, labels)
    ]
    return image, annotations


def generate_source(
    n: int,
    seed: int,
    spec: SceneSpec,
    start_id: int = 0,
    domain_tag: DomainTag = DomainTag.SOURCE,
) -> List[LabeledScene]:
    """
    Generate ``n`` labeled scenes; scene ``i`` depends only on (seed, start_id + i)

    Args:
        n: Number of scenes (>= 1)
        seed: Run seed
        spec: Scene geometry and class settings
        start_id: First scene id, so splits stay disjoint
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    scenes = []
    for i in range(n):
        scene_id = start_id + i
        image, annotations = render_scene(scene_rng(seed, scene_id), spec)
        scenes.append(LabeledScene(scene_id=scene_id, image=image,
                                   annotations=tuple(annotations), domain_tag=domain_tag))
    return scenes


def _rotate_palette(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate RGB vectors about the gray axis (Rodrigues)"""
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
    centred = image - GRAY
    return centred @ rot.T + GRAY


def shift_image(image: np.ndarray, shift: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    shift = shift.resolved()
    out = np.array(image, dtype=np.float64)
    if shift.palette_rotation != 0.0 and out.shape[2] == 3:
        out = _rotate_palette(out, shift.palette_rotation)
    if shift.contrast_scale != 1.0:
        out = (out - GRAY) * shift.contrast_scale + GRAY
    if shift.brightness_shift != 0.0:
        out = out + shift.brightness_shift
    if shift.haze_strength != 0.0:
        out = (1.0 - shift.haze_strength) * out + shift.haze_strength * GRAY
    if shift.noise_sigma > 0.0:
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def apply_domain_shift(scene: LabeledScene, shift: DomainShiftSpec, seed: int) -> LabeledScene:
    """Pixel-level shift into the target domain; annotations are carried over untouched"""
    image = shift_image(scene.image, shift, scene_rng(seed, scene.scene_id))
    return scene.model_copy(update={"image": image, "domain_tag": DomainTag.TARGET})


def make_target_like(scene: LabeledScene, target_image: np.ndarray, beta: float) -> LabeledScene:
    """Fourier-transfer ``scene`` towards ``target_image``; annotations are inherited"""
    image = fda_transfer(scene.image, target_image, beta)
    return scene.model_copy(update={"image": image, "domain_tag": DomainTag.TARGET_LIKE})


def flip_image(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1, :])


def flip_annotations(annotations, image_width: int) -> Tuple[Annotation, ...]:
    if not annotations:
        return tuple()
    boxes = flip_boxes(np.asarray([a.box.as_tuple() for a in annotations]), image_width)
    return tuple(Annotation(box=BBox.from_array(b), class_id=a.class_id) for b, a in zip(boxes, annotations))


def weak_augment(image: np.ndarray, rng: np.random.Generator, flip: Optional[bool] = None) -> Augmented:
    """Horizontal flip with probability 0.5; the caller flips boxes via flip_boxes"""
    if flip is None:
        flip = bool(rng.random() < 0.5)
    return Augmented(flip_image(image) if flip else np.array(image, dtype=np.float64), flip)


def photometric_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Colour jitter, Gaussian noise and random erasing; geometry is untouched"""
    out = np.array(image, dtype=np.float64)
    out = out + rng.uniform(-0.2, 0.2)
    out = (out - out.mean()) * rng.uniform(0.7, 1.3) + out.mean()
    if out.shape[2] == 3:
        gray = out.mean(axis=2, keepdims=True)
        out = gray + (out - gray) * rng.uniform(0.7, 1.3)
    out = out + rng.normal(0.0, 0.03, size=out.shape)
    height, width = out.shape[:2]
    if rng.random() < 0.7:
        for _ in range(int(rng.integers(1, 4))):
            eh = int(rng.integers(2, max(3, height // 4)))
            ew = int(rng.integers(2, max(3, width // 4)))
            y = int(rng.integers(0, height - eh + 1))
            x = int(rng.integers(0, width - ew + 1))
            out[y:y + eh, x:x + ew] = rng.uniform(0.0, 1.0, size=out.shape[2])
    return np.clip(out, 0.0, 1.0)


def strong_augment(image: np.ndarray, rng: np.random.Generator, flip: Optional[bool] = None) -> Augmented:
    weak = weak_augment(image, rng, flip)
    return Augmented(photometric_augment(weak.image, rng), weak.flipped)
