//! Labelled images and the measurement datasets synthesized from them.

mod batch;
mod images;
mod measurements;

pub use batch::{batches, measurement_side, stack_images, stack_measurements};
pub use images::{
    gen_shapes, read_idx, read_idx_from, resize_nearest_pad, ImageSource, LabelledImageSet, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC, SHAPE_CLASSES,
};
pub use measurements::{
    load_dataset, split_by_config, synthesize_measurements, MeasurementDataset, MeasurementRecord, Split,
    SynthesisOptions, DATASET_MAGIC, DATASET_VERSION,
};
