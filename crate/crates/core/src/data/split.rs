use crate::data::Dataset;
use crate::error::{Error, Result};

/// Splits by class: the first half of the sorted class ids (rounded up)
/// train, the rest are held out.
pub fn zero_shot_split(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let classes = data.classes();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "zero-shot split needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let boundary = classes[classes.len().div_ceil(2) - 1];
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.labels[i] <= boundary);
    Ok((data.subset(&train), data.subset(&test)))
}
