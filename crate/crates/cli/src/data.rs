use anyhow::Result;
use qcfs_core::data::{load_mnist, synth_blobs};
use qcfs_core::{Dataset, Split};

use crate::{DataArgs, DatasetArg};

/// Blob problem served by `--dataset blobs`.
const BLOB_PER_CLASS: usize = 250;
const BLOB_CLASSES: usize = 4;
const BLOB_DIM: usize = 8;
const BLOB_SPREAD: f64 = 1.5;
const BLOB_TEST_FRACTION: f64 = 0.2;

pub fn num_classes(args: &DataArgs) -> usize {
    match args.dataset {
        DatasetArg::Mnist => 10,
        DatasetArg::Blobs => BLOB_CLASSES,
    }
}

fn blobs(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    let all = synth_blobs(BLOB_PER_CLASS, BLOB_CLASSES, BLOB_DIM, BLOB_SPREAD, args.data_seed)?;
    Ok(all.split_off(BLOB_TEST_FRACTION, args.data_seed)?)
}

pub fn load(args: &DataArgs, split: Split) -> Result<Dataset> {
    match args.dataset {
        DatasetArg::Mnist => Ok(load_mnist(&args.data_dir, split)?),
        DatasetArg::Blobs => {
            let (train, test) = blobs(args)?;
            Ok(match split {
                Split::Train => train,
                Split::Test => test,
            })
        }
    }
}

pub fn load_both(args: &DataArgs) -> Result<(Dataset, Dataset)> {
    match args.dataset {
        DatasetArg::Mnist => Ok((
            load_mnist(&args.data_dir, Split::Train)?,
            load_mnist(&args.data_dir, Split::Test)?,
        )),
        DatasetArg::Blobs => blobs(args),
    }
}

pub fn limited(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < ds.len() => Ok(ds.take(n)?),
        _ => Ok(ds),
    }
}
