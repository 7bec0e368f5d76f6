from .augment import AugmentationConfig, Batch, augment, batches
from .idx import (IdxFormatError, digits_of, load_idx, read_idx_images, read_idx_labels,
                  write_idx_images, write_idx_labels)
from .labels import (DIGITS, AssembledDataset, LabelSchema, LabelState, PartialLabelVector,
                     Sample, SourceDataset, SourceInfo, as_assembled, assemble, content_hash,
                     make_partial, read_manifest, write_manifest)
from .synth import synthesize_digits, synthesize_subset
from .variants import derive_variant, fraction_indices

__all__ = [
    "AssembledDataset", "AugmentationConfig", "Batch", "DIGITS", "IdxFormatError",
    "LabelSchema", "LabelState", "PartialLabelVector", "Sample", "SourceDataset", "SourceInfo",
    "as_assembled", "assemble", "augment", "batches", "content_hash", "derive_variant",
    "digits_of", "fraction_indices", "load_idx", "make_partial", "read_idx_images",
    "read_idx_labels", "read_manifest", "synthesize_digits", "synthesize_subset",
    "write_idx_images", "write_idx_labels", "write_manifest",
]
