"""Structure-token-conditioned UNet segmentation on frozen ViT features."""

from .backbone import (FeatureGrid, ImageSlice, PreparedImage, SyntheticBackbone,
                       build_backbone, preprocess)
from .conditioning import (ConditionedTrajectory, ConditioningDecoder,
                           StructureTokenTable, TwoWayBlock, koleo, replicate_token)
from .data import (DatasetSplit, LabeledVolume, generate_synthetic_volume,
                   load_dataset, make_split, reassemble_volume, slice_volume)
from .model import ConditionedSegNet, SegmentationModel
from .objectives import (LossConfig, combined_loss, dice_loss, focal_loss,
                         volume_miou)
from .pixel_decoder import ConditionedUNet, UNetConfig, predict_mask, segment
from .trainer import (build_model, early_stop, evaluate, expand_labels,
                      load_checkpoint, save_checkpoint, train)

__version__ = "0.1.0"
