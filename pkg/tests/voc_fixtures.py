"""Expected parses of the VOC fixture corpus under tests/fixtures/voc."""
import os

DIR = os.path.join(os.path.dirname(__file__), "fixtures", "voc")

# file -> (metadata, [(name, (cx, cy, w, h), difficult)])
VALID = {
    "one_object.xml": (
        {"filename": "000001.jpg", "width": 48, "height": 48, "depth": 1},
        [("square", (5.5, 10.5, 10, 20), False)],
    ),
    "empty.xml": ({"filename": "000002.jpg", "width": 64, "height": 32, "depth": 3}, []),
    "two_objects.xml": (
        {"filename": "000003.jpg", "width": 100, "height": 80},
        [("disc", (20.5, 28.0, 20, 15), True), ("ring", (50.0, 5.0, 1, 1), False)],
    ),
}

# file -> substring the error message must contain
INVALID = {
    "missing_bndbox.xml": "object/bndbox",
    "missing_width.xml": "size/width",
    "non_integer.xml": "object/bndbox/xmin",
}


def read(name):
    with open(os.path.join(DIR, name)) as fh:
        return fh.read()
