"""Canonical vocabularies shared by every stage of the pipeline."""

# Diagnosis classes in submission-file column order. UNK is the ninth,
# catch-all class of benign skin alterations; models are trained on all
# nine but evaluated on the first eight only.
CLASSES = ("MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC", "SCC", "UNK")
KNOWN_CLASSES = CLASSES[:8]
UNK = "UNK"

CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

# The eight anatomical sites, alphabetical. This order defines the
# one-hot layout of the meta feature vector.
SITES = (
    "anterior torso",
    "head/neck",
    "lateral torso",
    "lower extremity",
    "oral/genital",
    "palms/soles",
    "posterior torso",
    "upper extremity",
)

SEXES = ("male", "female")
