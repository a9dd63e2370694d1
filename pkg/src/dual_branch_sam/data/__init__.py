from dual_branch_sam.data.dataset import (
    MANIFEST_NAME,
    SegmentationSample,
    load_dataset,
    mask_box,
    read_manifest,
    write_dataset,
)
from dual_branch_sam.data.synthetic import generate_sample, synth_dataset_generate
from dual_branch_sam.data.transforms import Batch, prepare_batch, resize_bilinear, resize_mask
from dual_branch_sam.data.volume import read_volume, rescale_unit, slice_volume_files, volume_slice_axial
