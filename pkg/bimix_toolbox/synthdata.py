# -*- coding: utf-8 -*-

"""
Procedural generator of street-like scenes with pixel labels. Three renderings
exist for every scene layout:

    source   palette A, light noise, fully labeled
    day      hue-shifted palette B, light noise
    night    the day rendering darkened by a gamma curve with a blue cast, heavier
             noise, dynamic objects removed at random and the whole frame
             translated by a few pixels (coarse alignment with its day partner)

All randomness comes from named substreams keyed by (seed, split, index), so the
dataset content does not depend on the order or the number of workers.
"""

import json
import shutil
import multiprocessing
from pathlib import Path
from collections import OrderedDict
from typing import NamedTuple, Tuple

import numpy as np
from PIL import Image
from tqdm import tqdm
from loguru import logger
from scipy.ndimage import shift as ndimage_shift
from matplotlib.colors import rgb_to_hsv, hsv_to_rgb

from ._errors import OverwriteError, PairingError, DataError
from ._utils import rng_substream, json_digest, file_digest

GENERATOR_VERSION = "1.0"
MANIFEST_VERSION = 1
MANIFEST_FILENAME = "manifest.json"

CLASS_NAMES = ("road", "sky", "building", "vegetation", "car", "person", "pole", "sign")
ROAD, SKY, BUILDING, VEGETATION, CAR, PERSON, POLE, SIGN = range(len(CLASS_NAMES))
DYNAMIC_CLASSES = (CAR, PERSON)

# Source palette (RGB in [0, 1])
PALETTE_A = np.array([
    [0.45, 0.45, 0.47],     # road
    [0.55, 0.75, 0.95],     # sky
    [0.65, 0.55, 0.45],     # building
    [0.25, 0.55, 0.20],     # vegetation
    [0.80, 0.15, 0.15],     # car
    [0.90, 0.70, 0.30],     # person
    [0.30, 0.30, 0.32],     # pole
    [0.95, 0.85, 0.10],     # sign
])

# Colors of the prediction and label pngs (uint8)
LABEL_COLORS = np.array([
    [128, 64, 128],
    [70, 130, 180],
    [70, 70, 70],
    [107, 142, 35],
    [0, 0, 142],
    [220, 20, 60],
    [153, 153, 153],
    [220, 220, 0],
], dtype=np.uint8)

SPLIT_PREFIX = dict(source="src", pairs="pair", test="test", val="val")


def hue_shift_palette(palette, hue_shift=0.05, saturation_scale=0.85, value_scale=0.95):
    """
    Shift the hue (and damp saturation and value) of an RGB palette
    :param palette: (numpy.ndarray) (n, 3) RGB in [0, 1]
    :return: (numpy.ndarray) (n, 3)
    """
    hsv = rgb_to_hsv(np.clip(palette, 0.0, 1.0))
    hsv[:, 0] = np.mod(hsv[:, 0] + hue_shift, 1.0)
    hsv[:, 1] = np.clip(hsv[:, 1] * saturation_scale, 0.0, 1.0)
    hsv[:, 2] = np.clip(hsv[:, 2] * value_scale, 0.0, 1.0)
    return hsv_to_rgb(hsv)


PALETTE_B = hue_shift_palette(PALETTE_A)


class RenderCfg(object):

    def __init__(self, source_noise=0.02, day_noise=0.02, night_noise=0.05, night_gain=0.25, night_gamma=2.2,
                 blue_cast=0.03, removal_prob=0.7, max_offset=4):
        """
        Settings of the three rendering modes
        :param source_noise: gaussian noise sigma of source renderings
        :param day_noise: gaussian noise sigma of day renderings
        :param night_noise: gaussian noise sigma of night renderings
        :param night_gain: night intensity gain
        :param night_gamma: night gamma exponent
        :param blue_cast: additive offset of the night blue channel
        :param removal_prob: probability that a dynamic object is absent at night
        :param max_offset: night frames are translated by up to this many pixels per axis
        """
        self.source_noise = float(source_noise)
        self.day_noise = float(day_noise)
        self.night_noise = float(night_noise)
        self.night_gain = float(night_gain)
        self.night_gamma = float(night_gamma)
        self.blue_cast = float(blue_cast)
        self.removal_prob = float(removal_prob)
        self.max_offset = int(max_offset)
        if not 0.0 <= self.removal_prob <= 1.0:
            raise ValueError("removal_prob must be in [0, 1] (got %g)" % self.removal_prob)

    def to_dict(self):
        return OrderedDict((("source_noise", self.source_noise), ("day_noise", self.day_noise),
                            ("night_noise", self.night_noise), ("night_gain", self.night_gain),
                            ("night_gamma", self.night_gamma), ("blue_cast", self.blue_cast),
                            ("removal_prob", self.removal_prob), ("max_offset", self.max_offset)))


class SceneObject(NamedTuple):
    class_id: int
    shape: str
    top: int
    left: int
    height: int
    width: int
    jitter: Tuple[float, float, float]

    @property
    def bottom(self):
        return self.top + self.height

    @property
    def right(self):
        return self.left + self.width

    def region(self, height, width):
        """ Boolean mask of the object in an image of the given size """
        mask = np.zeros((height, width), dtype=bool)
        if self.shape == "rect":
            mask[self.top:self.bottom, self.left:self.right] = True
            return mask
        rows, cols = np.mgrid[self.top:self.bottom, self.left:self.right]
        cy, cx = self.top + (self.height - 1) / 2.0, self.left + (self.width - 1) / 2.0
        ry, rx = self.height / 2.0, self.width / 2.0
        mask[self.top:self.bottom, self.left:self.right] = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        return mask


class SceneSpec(object):
    """
    Layout of one scene: a sky band on top, a road band at the bottom, a building
    facade in between and a list of object instances drawn in order
    """

    def __init__(self, height, width, sky_rows, road_top, objects):
        self.height = int(height)
        self.width = int(width)
        self.sky_rows = int(sky_rows)
        self.road_top = int(road_top)
        self.objects = tuple(objects)

    def count(self, class_id):
        return sum(1 for obj in self.objects if obj.class_id == class_id)

    @property
    def dynamic_objects(self):
        return [i for i, obj in enumerate(self.objects) if obj.class_id in DYNAMIC_CLASSES]

    def to_dict(self):
        return OrderedDict((("height", self.height), ("width", self.width), ("sky_rows", self.sky_rows),
                            ("road_top", self.road_top), ("objects", [obj._asdict() for obj in self.objects])))

    def __eq__(self, other):
        if not isinstance(other, SceneSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _uniform_size(rng, extent, low, high, minimum=1):
    return max(minimum, int(round(extent * rng.uniform(low, high))))


def sample_scene(rng, image_size=96):
    """
    Draw a random scene layout
    :param rng: (numpy.random.Generator) the `scene/<split>/<index>` stream
    :param image_size: (int) square image size
    :return: SceneSpec
    """
    if image_size < 32:
        raise ValueError("image_size must be >= 32 (got %d)" % image_size)
    height = width = int(image_size)
    sky_rows = int(round(height * rng.uniform(0.25, 0.40)))
    road_top = height - int(round(height * rng.uniform(0.30, 0.45)))

    def jitter():
        return tuple(float(v) for v in rng.uniform(-0.05, 0.05, size=3))

    def left_for(w):
        return int(rng.integers(0, width - w + 1))

    objects = []
    for _ in range(int(rng.integers(2, 6))):
        w = _uniform_size(rng, width, 0.12, 0.30)
        top = max(0, int(round(sky_rows - height * rng.uniform(0.05, 0.20))))
        objects.append(SceneObject(BUILDING, "rect", top, left_for(w), road_top - top, w, jitter()))

    for _ in range(int(rng.integers(1, 4))):
        w = _uniform_size(rng, width, 0.10, 0.25, minimum=3)
        h = min(_uniform_size(rng, height, 0.08, 0.18, minimum=3), road_top)
        objects.append(SceneObject(VEGETATION, "ellipse", road_top - h, left_for(w), h, w, jitter()))

    for _ in range(int(rng.integers(0, 4))):
        w = int(rng.integers(1, 3))
        top = max(0, road_top - _uniform_size(rng, height, 0.20, 0.40))
        objects.append(SceneObject(POLE, "rect", top, left_for(w), road_top - top, w, jitter()))

    for _ in range(int(rng.integers(0, 3))):
        s = int(rng.integers(4, 8))
        low = max(0, sky_rows - s // 2)
        top = int(rng.integers(low, max(low, road_top - s) + 1))
        objects.append(SceneObject(SIGN, "rect", top, left_for(s), s, s, jitter()))

    for _ in range(int(rng.integers(0, 4))):
        h = _uniform_size(rng, height, 0.08, 0.16, minimum=3)
        w = _uniform_size(rng, width, 0.12, 0.25, minimum=4)
        top = int(rng.integers(road_top, height - h + 1))
        objects.append(SceneObject(CAR, "rect", top, left_for(w), h, w, jitter()))

    for _ in range(int(rng.integers(0, 4))):
        h = _uniform_size(rng, height, 0.10, 0.20, minimum=4)
        w = _uniform_size(rng, width, 0.03, 0.06, minimum=2)
        top = int(rng.integers(road_top, height - h + 1))
        objects.append(SceneObject(PERSON, "ellipse", top, left_for(w), h, w, jitter()))

    return SceneSpec(height, width, sky_rows, road_top, objects)


def rasterize(scene, palette, skip=()):
    """
    Noise-free rendering of a scene
    :param scene: SceneSpec
    :param palette: (numpy.ndarray) (8, 3) class colors
    :param skip: indices of objects that are left out
    :return: (image (H, W, 3) float64 in [0, 1], labels (H, W) uint8)
    """
    height, width = scene.height, scene.width
    labels = np.full((height, width), BUILDING, dtype=np.uint8)
    labels[:scene.sky_rows] = SKY
    labels[scene.road_top:] = ROAD
    image = palette[labels].astype(np.float64)

    # Brighter sky towards the horizon, darker road towards the camera
    rows = np.arange(height, dtype=np.float64)[:, np.newaxis]
    shade = np.ones((height, 1))
    shade[:scene.sky_rows] = 0.85 + 0.15 * rows[:scene.sky_rows] / max(scene.sky_rows, 1)
    shade[scene.road_top:] = 1.0 - 0.15 * (rows[scene.road_top:] - scene.road_top) / max(height - scene.road_top, 1)
    image *= shade[:, :, np.newaxis]

    for i, obj in enumerate(scene.objects):
        if i in skip:
            continue
        region = obj.region(height, width)
        image[region] = np.clip(palette[obj.class_id] + np.asarray(obj.jitter), 0.0, 1.0)
        labels[region] = obj.class_id

    return np.clip(image, 0.0, 1.0), labels


def night_transform(image, cfg):
    """
    Darken a clean day rendering: gain * v ** gamma per channel plus a blue cast
    :param image: (numpy.ndarray) (H, W, 3) in [0, 1]
    :param cfg: RenderCfg
    :return: (numpy.ndarray) (H, W, 3), not clipped
    """
    night = cfg.night_gain * np.power(np.clip(image, 0.0, 1.0), cfg.night_gamma)
    night[..., 2] += cfg.blue_cast
    return night


def translate(array, offset):
    """
    Integer translation of an image (H, W, 3) or label map (H, W); uncovered border
    pixels repeat the nearest edge
    :param array: numpy array
    :param offset: (dy, dx)
    :return: numpy array of the same shape and dtype
    """
    dy, dx = int(offset[0]), int(offset[1])
    shifts = (dy, dx) if array.ndim == 2 else (dy, dx, 0)
    return ndimage_shift(array, shifts, order=0, mode="nearest")


def render(scene, mode, rng, cfg=None, return_info=False):
    """
    Render a scene layout as source, day or night image with its label map
    :param scene: SceneSpec
    :param mode: (str) `source`, `day` or `night`
    :param rng: (numpy.random.Generator) the `render/<split>/<index>/<mode>` stream
    :param cfg: RenderCfg (defaults if None)
    :param return_info: (bool) also return {offset, removed} of the night rendering
    :return: (image (H, W, 3) float32 in [0, 1], labels (H, W) uint8) [, info]
    """
    cfg = cfg if cfg is not None else RenderCfg()
    info = dict(offset=(0, 0), removed=[])

    if mode == "source":
        clean, labels = rasterize(scene, PALETTE_A)
        sigma = cfg.source_noise
    elif mode == "day":
        clean, labels = rasterize(scene, PALETTE_B)
        sigma = cfg.day_noise
    elif mode == "night":
        removed = [i for i in scene.dynamic_objects if rng.random() < cfg.removal_prob]
        offset = tuple(int(v) for v in rng.integers(-cfg.max_offset, cfg.max_offset + 1, size=2))
        clean, labels = rasterize(scene, PALETTE_B, skip=set(removed))
        clean = translate(night_transform(clean, cfg), offset)
        labels = translate(labels, offset)
        sigma = cfg.night_noise
        info = dict(offset=offset, removed=removed)
    else:
        raise ValueError("Unknown render mode: %s (known modes: source, day, night)" % str(mode))

    image = np.clip(clean + rng.normal(0.0, sigma, size=clean.shape), 0.0, 1.0).astype(np.float32)
    if return_info:
        return image, labels, info
    return image, labels


def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(filepath, array):
    """ Write an (H, W, 3) uint8 image or (H, W) uint8 label map """
    Path(filepath).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(str(filepath), format="PNG")


def colorize_labels(labels):
    """ Map class ids to the display colors, ignored pixels become black """
    labels = np.asarray(labels)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels < len(LABEL_COLORS)
    rgb[valid] = LABEL_COLORS[labels[valid]]
    return rgb


class DatasetCounts(NamedTuple):
    source: int = 400
    pairs: int = 200
    test: int = 50
    val: int = 25


def item_paths(kind, index):
    """ Relative file paths of one generated item """
    stem = "%s_%05d" % (SPLIT_PREFIX[kind], index)
    if kind == "source":
        return ["source/images/%s.png" % stem, "source/labels/%s.png" % stem]
    elif kind == "pairs":
        return ["target/day/%s.png" % stem, "target/night/%s.png" % stem]
    return ["%s/images/%s.png" % (kind, stem), "%s/labels/%s.png" % (kind, stem)]


def write_item(root, kind, index, seed, image_size, render_cfg):
    """
    Render and write the files of one item
    :return: list of (relative path, sha256)
    """
    root = Path(root)
    split = "target" if kind == "pairs" else kind
    scene = sample_scene(rng_substream(seed, "scene", split, index), image_size=image_size)
    paths = item_paths(kind, index)

    if kind == "source":
        image, labels = render(scene, "source", rng_substream(seed, "render", split, index, "source"), render_cfg)
        arrays = [to_uint8(image), labels]
    elif kind == "pairs":
        day, _ = render(scene, "day", rng_substream(seed, "render", split, index, "day"), render_cfg)
        night, _ = render(scene, "night", rng_substream(seed, "render", split, index, "night"), render_cfg)
        arrays = [to_uint8(day), to_uint8(night)]
    else:
        image, labels = render(scene, "night", rng_substream(seed, "render", split, index, "night"), render_cfg)
        arrays = [to_uint8(image), labels]

    result = []
    for relpath, array in zip(paths, arrays):
        write_png(root / relpath, array)
        result.append((relpath, file_digest(root / relpath)))
    return result


class DatasetManifest(object):
    """
    Content description of a generated dataset: split sizes, seed, palettes,
    rendering settings, the day/night pairing table and the digest of every file
    """

    def __init__(self, content):
        self.content = OrderedDict(content)
        self.check_pairing()

    @classmethod
    def build(cls, seed, image_size, counts, render_cfg, files):
        """
        :param seed: (int) dataset seed
        :param image_size: (int) image size
        :param counts: DatasetCounts
        :param render_cfg: RenderCfg
        :param files: OrderedDict relative path -> sha256
        :return: DatasetManifest
        """
        pairing = []
        for index in range(counts.pairs):
            day, night = item_paths("pairs", index)
            pairing.append(OrderedDict((("day", day), ("night", night))))
        palette = OrderedDict((
            ("source", OrderedDict((name, [float(v) for v in rgb]) for name, rgb in zip(CLASS_NAMES, PALETTE_A))),
            ("day", OrderedDict((name, [float(v) for v in rgb]) for name, rgb in zip(CLASS_NAMES, PALETTE_B))),
            ("display", OrderedDict((name, [int(v) for v in rgb]) for name, rgb in zip(CLASS_NAMES, LABEL_COLORS)))))
        content = OrderedDict((
            ("manifest_version", MANIFEST_VERSION),
            ("generator_version", GENERATOR_VERSION),
            ("seed", int(seed)),
            ("image_size", int(image_size)),
            ("counts", OrderedDict(counts._asdict())),
            ("class_names", list(CLASS_NAMES)),
            ("dynamic_classes", list(DYNAMIC_CLASSES)),
            ("palette", palette),
            ("render", render_cfg.to_dict()),
            ("pairing", pairing),
            ("files", files)))
        content["digest"] = json_digest(content)
        return cls(content)

    @classmethod
    def from_file(cls, filepath):
        with open(str(filepath), "r") as f:
            return cls(json.load(f, object_pairs_hook=OrderedDict))

    def write(self, filepath):
        with open(str(filepath), "w") as f:
            json.dump(self.content, f, indent=2)

    def check_pairing(self):
        nights = [entry["night"] for entry in self.content["pairing"]]
        days = [entry["day"] for entry in self.content["pairing"]]
        if len(set(nights)) != len(nights) or len(set(days)) != len(days):
            raise PairingError("pairing table maps an image more than once")
        for day, night in zip(days, nights):
            if Path(day).stem != Path(night).stem:
                raise PairingError("pair %s / %s does not share a file stem" % (day, night))

    @property
    def digest(self):
        return self.content["digest"]

    @property
    def counts(self):
        return DatasetCounts(**self.content["counts"])

    @property
    def pairing(self):
        return [(entry["day"], entry["night"]) for entry in self.content["pairing"]]

    @property
    def files(self):
        return self.content["files"]

    def verify(self, root):
        """ Compare the file digests with the files under root """
        root = Path(root)
        for relpath, digest in self.files.items():
            filepath = root / relpath
            if not filepath.is_file():
                raise DataError("Missing dataset file: %s" % filepath)
            if file_digest(filepath) != digest:
                raise DataError("Dataset file changed since generation: %s" % filepath)


LAYOUT_ENTRIES = ("source", "target", "test", "val", MANIFEST_FILENAME)


def write_dataset(root, counts=None, seed=0, image_size=96, render_cfg=None, force=False,
                  use_multiprocessing=False, mp_reserve_cpus=2, progress=False):
    """
    Generate the source, target pair, test and validation splits
    :param root: (str, pathlib.Path) output directory
    :param counts: DatasetCounts (defaults: 400 source, 200 pairs, 50 test, 25 val)
    :param seed: (int) dataset seed
    :param image_size: (int) square image size
    :param render_cfg: RenderCfg
    :param force: (bool) replace an existing dataset
    :param use_multiprocessing: (bool) render items in a process pool
    :param mp_reserve_cpus: (int) cpus not used by the pool
    :param progress: (bool) show a progress bar
    :return: DatasetManifest
    """
    root = Path(root)
    counts = counts if counts is not None else DatasetCounts()
    render_cfg = render_cfg if render_cfg is not None else RenderCfg()

    if root.exists() and any(root.iterdir()):
        if not force:
            raise OverwriteError("Output directory is not empty: %s (use --force)" % root)
        logger.warning("Replacing dataset in %s" % root)
        for entry in LAYOUT_ENTRIES:
            target = root / entry
            if target.is_dir():
                shutil.rmtree(str(target))
            elif target.is_file():
                target.unlink()
    root.mkdir(parents=True, exist_ok=True)

    items = [(kind, index) for kind in DatasetCounts._fields for index in range(getattr(counts, kind))]
    logger.info("Generate %d source images, %d pairs, %d test and %d val images in %s" % (
        counts.source, counts.pairs, counts.test, counts.val, root))

    if use_multiprocessing:
        n_processes = multiprocessing.cpu_count() - mp_reserve_cpus
        n_processes = n_processes if n_processes > 1 else 1
        logger.info("Use multi-processing with {} workers".format(n_processes))
        process_pool = multiprocessing.Pool(n_processes)
        results = [process_pool.apply_async(write_item, args=(root, kind, index, seed, image_size, render_cfg))
                   for kind, index in items]
        results = [result.get() for result in tqdm(results, desc="gen-data", disable=not progress)]
        process_pool.close()
        process_pool.join()
    else:
        results = [write_item(root, kind, index, seed, image_size, render_cfg)
                   for kind, index in tqdm(items, desc="gen-data", disable=not progress)]

    files = OrderedDict(entry for result in results for entry in result)
    manifest = DatasetManifest.build(seed, image_size, counts, render_cfg, files)
    manifest.write(root / MANIFEST_FILENAME)
    logger.info("Dataset digest: %s" % manifest.digest)
    return manifest
