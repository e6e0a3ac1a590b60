//! Dataset ingestion: idx files, CSV, and the synthetic generators.

use std::path::Path;

use super::config::{DataSource, ExperimentConfig};
use crate::data::{channel_stats, normalize_channels, synthetic_2d, synthetic_image, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Parses an idx file holding unsigned bytes; returns its dimensions and data.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated idx magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, "idx magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(parse_err(
            2,
            format!("unsupported idx element type 0x{:02x}", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(parse_err(3, "idx rank must be positive"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), "truncated idx dimensions"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| parse_err(4, "idx dimensions overflow"))?;
    let body = &bytes[header..];
    if body.len() != n {
        return Err(parse_err(
            header + body.len().min(n),
            format!("idx body has {} bytes, dimensions need {n}", body.len()),
        ));
    }
    Ok((dims, body.to_vec()))
}

/// Images (`[N, H, W]` or `[N, C, H, W]`, scaled to [0, 1]) and labels.
pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (idims, ibytes) = parse_idx(&std::fs::read(images)?)?;
    let (ldims, lbytes) = parse_idx(&std::fs::read(labels)?)?;
    let shape = match idims.len() {
        3 => vec![idims[0], 1, idims[1], idims[2]],
        4 => idims.clone(),
        r => {
            return Err(parse_err(
                3,
                format!("image idx must be 3-d or 4-d, got {r}-d"),
            ))
        }
    };
    if ldims.len() != 1 || ldims[0] != idims[0] {
        return Err(parse_err(
            3,
            format!("labels {ldims:?} do not match {} images", idims[0]),
        ));
    }
    let x = Tensor::from_vec(shape, ibytes.iter().map(|&b| b as f64 / 255.0).collect())?;
    let y: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    if let Some(pos) = y.iter().position(|&c| c >= classes) {
        return Err(parse_err(
            8 + pos,
            format!("label {} out of range for {classes} classes", y[pos]),
        ));
    }
    Dataset::new(x, y, classes)
}

/// CSV with a header row; every column but the last is a feature and the
/// last is an integer class label.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let width = reader.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(parse_err(
            0,
            "csv needs at least one feature column and a label column",
        ));
    }
    let mut data = Vec::new();
    let mut y = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        if rec.len() != width {
            return Err(parse_err(
                offset,
                format!("row has {} fields, header has {width}", rec.len()),
            ));
        }
        for f in rec.iter().take(width - 1) {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(offset, format!("bad number `{f}`")))?,
            );
        }
        let label = &rec[width - 1];
        let c: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(offset, format!("bad label `{label}`")))?;
        if c >= classes {
            return Err(parse_err(
                offset,
                format!("label {c} out of range for {classes} classes"),
            ));
        }
        y.push(c);
    }
    let n = y.len();
    Dataset::new(Tensor::from_vec(vec![n, width - 1], data)?, y, classes)
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => parse_err(
            offset,
            format!("row has {len} fields, header has {expected_len}"),
        ),
        other => parse_err(offset, format!("{other:?}")),
    }
}

/// Loads the configured source and splits it into train and eval parts
/// (seeded shuffle). Image data is normalized per channel with statistics
/// of the training part.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let data = match &cfg.dataset {
        DataSource::SyntheticImage => synthetic_image(
            cfg.seed,
            cfg.dataset_size,
            cfg.classes,
            cfg.image_size,
            cfg.data_noise,
        )?,
        DataSource::Synthetic2d => synthetic_2d(cfg.seed, cfg.dataset_size, cfg.classes)?,
        DataSource::Csv(p) => load_csv(Path::new(p), cfg.classes)?,
        DataSource::Idx { images, labels } => {
            load_idx(Path::new(images), Path::new(labels), cfg.classes)?
        }
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(cfg.seed).fork(7).shuffle(&mut order);
    let n_eval = (cfg.eval_fraction * data.len() as f64).round() as usize;
    let (eval_idx, train_idx) = order.split_at(n_eval);
    let mut train = data.subset(train_idx);
    let mut eval = data.subset(eval_idx);
    if train.x.rank() == 4 {
        let (m, s) = channel_stats(&train.x);
        normalize_channels(&mut train.x, &m, &s);
        normalize_channels(&mut eval.x, &m, &s);
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx(magic: [u8; 4], dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn idx_images_are_three_dimensional_bytes() {
        let body: Vec<u8> = (0..12).collect();
        let bytes = idx([0, 0, 8, 3], &[3, 2, 2], &body);
        assert_eq!(&bytes[..4], &0x0000_0803u32.to_be_bytes());
        let (dims, data) = parse_idx(&bytes).unwrap();
        assert_eq!(dims, vec![3, 2, 2]);
        assert_eq!(data, body);
        // Oracle: header is 4 + 4 * 3 bytes, so element k of image i at
        // row r, column c sits at byte 16 + 4i + 2r + c.
        assert_eq!(bytes[16 + 4 * 2 + 2 + 1], data[11]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        assert!(matches!(
            parse_idx(&[0, 0, 9, 1]),
            Err(Error::Parse { offset: 2, .. })
        ));
        let short = idx([0, 0, 8, 1], &[5], &[1, 2]);
        assert!(matches!(
            parse_idx(&short),
            Err(Error::Parse { offset: 10, .. })
        ));
    }

    #[test]
    fn idx_pair_loads_scaled_images() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, idx([0, 0, 8, 3], &[2, 1, 2], &[0, 255, 51, 102])).unwrap();
        std::fs::write(&lp, idx([0, 0, 8, 1], &[2], &[1, 0])).unwrap();
        let d = load_idx(&ip, &lp, 2).unwrap();
        assert_eq!(d.x.shape(), &[2, 1, 1, 2]);
        assert_eq!(d.x.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.y, vec![1, 0]);
    }

    #[test]
    fn csv_rows_must_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,b,label\n1,2,0\n3,4,1\n").unwrap();
        let d = load_csv(&p, 2).unwrap();
        assert_eq!(d.x.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.y, vec![0, 1]);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(b"a,b,label\n1,2,0\n3,1\n").unwrap();
        drop(f);
        match load_csv(&p, 2) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_normalized() {
        let cfg = ExperimentConfig::default();
        let (a, ea) = load_dataset(&cfg).unwrap();
        let (b, eb) = load_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        assert_eq!(a.len() + ea.len(), cfg.dataset_size);
        let (m, _) = channel_stats(&a.x);
        assert!(m.iter().all(|x| x.abs() < 1e-10));
    }
}
