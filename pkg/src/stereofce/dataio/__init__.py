"""File formats and scene generation: labels, calibration, images, synthetic data."""

from .kitti import (KittiCalib, KittiLabel, format_label, parse_calib_file,
                    parse_label_file, parse_label_line, read_split,
                    serialize_labels, write_calib_file, write_split)
from .ppm import read_image, write_pgm, write_ppm
from .synthetic import (LoadedScene, RigConfig, SyntheticScene, load_scene,
                        make_rig, render_synthetic, save_scene, scene_name)

__all__ = [
    "KittiCalib", "KittiLabel", "format_label", "parse_calib_file",
    "parse_label_file", "parse_label_line", "read_split", "serialize_labels",
    "write_calib_file", "write_split", "read_image", "write_pgm", "write_ppm",
    "LoadedScene", "RigConfig", "SyntheticScene", "load_scene", "make_rig",
    "render_synthetic", "save_scene", "scene_name",
]
