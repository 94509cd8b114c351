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

"""VOC-style dataset layout.

    <root>/JPEGImages/<id>.jpg|png
    <root>/Annotations/<id>.xml
    <root>/ImageSets/Main/<split>.txt

Boxes on disk are 1-based inclusive pixel indices, in memory (x1, y1, x2, y2)
are 0-based with exclusive x2 / y2: x1 = xmin - 1, x2 = xmax.
"""

import os
import xml.etree.ElementTree as ET
from typing import List, Sequence

import numpy as np
from PIL import Image

from ..errors import AnnotationParseError
from .catalog import Annotation, ClassCatalog, ImageSample

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def _find_image(root, image_id):
    for ext in IMAGE_EXTENSIONS:
        path = os.path.join(root, "JPEGImages", image_id + ext)
        if os.path.isfile(path):
            return path
    raise FileNotFoundError(
        f"no image for '{image_id}' in {os.path.join(root, 'JPEGImages')}"
    )


def read_image_set(root, split_name) -> List[str]:
    path = os.path.join(root, "ImageSets", "Main", f"{split_name}.txt")
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def parse_annotation(path, catalog: ClassCatalog) -> List[Annotation]:
    """Parse a VOC xml file into annotations, rejecting names outside the catalog."""
    try:
        tree = ET.parse(path)
    except ET.ParseError as e:
        raise AnnotationParseError(path, f"malformed xml ({e})")
    annotations = []
    for obj in tree.getroot().findall("object"):
        name_node = obj.find("name")
        bbox = obj.find("bndbox")
        if name_node is None or bbox is None:
            raise AnnotationParseError(path, "object without <name> or <bndbox>")
        name = (name_node.text or "").strip()
        if name not in catalog.class_names:
            raise AnnotationParseError(path, f"class '{name}' is not in the catalog")
        try:
            xmin, ymin, xmax, ymax = [
                float(bbox.find(tag).text) for tag in ("xmin", "ymin", "xmax", "ymax")
            ]
        except (AttributeError, TypeError, ValueError):
            raise AnnotationParseError(path, "bndbox needs numeric xmin, ymin, xmax, ymax")
        annotations.append(
            Annotation(catalog.index(name), (xmin - 1.0, ymin - 1.0, xmax, ymax))
        )
    return annotations


def load_voc_annotations(root_path, split_name, catalog: ClassCatalog) -> List[ImageSample]:
    """
    Reads every image listed in ImageSets/Main/<split_name>.txt.

    Missing files raise FileNotFoundError, unparsable or out-of-catalog annotations
    raise AnnotationParseError naming the file.
    """
    samples = []
    for image_id in read_image_set(root_path, split_name):
        xml_path = os.path.join(root_path, "Annotations", image_id + ".xml")
        if not os.path.isfile(xml_path):
            raise FileNotFoundError(f"annotation file {xml_path} does not exist")
        annotations = parse_annotation(xml_path, catalog)
        with Image.open(_find_image(root_path, image_id)) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.uint8)
        sample = ImageSample(image, annotations, image_id)
        try:
            sample.validate(catalog)
        except ValueError as e:
            raise AnnotationParseError(xml_path, str(e))
        samples.append(sample)
    return samples


def _annotation_xml(sample: ImageSample, catalog: ClassCatalog) -> ET.ElementTree:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = sample.image_id + ".png"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(sample.width)
    ET.SubElement(size, "height").text = str(sample.height)
    ET.SubElement(size, "depth").text = "3"
    for a in sample.annotations:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = catalog.name(a.class_id)
        ET.SubElement(obj, "difficult").text = "0"
        bndbox = ET.SubElement(obj, "bndbox")
        x1, y1, x2, y2 = a.box
        for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), (x1 + 1, y1 + 1, x2, y2)):
            ET.SubElement(bndbox, tag).text = str(int(round(value)))
    return ET.ElementTree(root)


def write_voc_dataset(
    samples: Sequence[ImageSample], root_path, split_name, catalog: ClassCatalog
):
    """Writes samples as PNG images and VOC xml files and lists them under split_name."""
    for sub in ("JPEGImages", "Annotations", os.path.join("ImageSets", "Main")):
        os.makedirs(os.path.join(root_path, sub), exist_ok=True)
    for sample in samples:
        image = sample.image
        if image.dtype != np.uint8:
            image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(image).save(
            os.path.join(root_path, "JPEGImages", sample.image_id + ".png")
        )
        _annotation_xml(sample, catalog).write(
            os.path.join(root_path, "Annotations", sample.image_id + ".xml")
        )
    with open(os.path.join(root_path, "ImageSets", "Main", f"{split_name}.txt"), "w") as f:
        f.write("\n".join(s.image_id for s in samples) + "\n")
