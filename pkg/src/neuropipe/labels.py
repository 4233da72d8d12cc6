import enum


class LesionClass(enum.IntEnum):
    """Whole-brain diagnostic category; the ordinal is the classifier output index."""

    Healthy = 0
    TumorHGG = 1
    TumorLGG = 2
    Alzheimer = 3
    MultipleSclerosis = 4

    @classmethod
    def parse(cls, text) -> "LesionClass":
        if isinstance(text, cls):
            return text
        if isinstance(text, int) or str(text).isdigit():
            return cls(int(text))
        return cls[str(text)]


# lesion compartments, in instance-category order (category 0 is background)
SUBREGIONS = ("tumor-core", "enhancing-core", "non-enhancing-core", "edema")
