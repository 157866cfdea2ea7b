"""Cross-lingual span-masking pre-training with contrastive consistency,
from parallel corpora to few-shot span extraction."""

__version__ = "0.1.0"
