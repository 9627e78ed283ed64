//! On-disk dataset directories.
//!
//! ```text
//! manifest.txt              "cpe-dataset 1", "classes <C>", then one scene stem per line
//! <stem>.feat               "CPE-FEAT-1\n", u64 C, H, W, f64 scale, C·H·W f64 values (LE)
//! <stem>.gt.txt             x y w h class_id
//! <stem>.proposals.txt      x y w h
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CpeError, Result};
use crate::features::FeatureMap;
use crate::geometry::{format_boxes, parse_boxes, BoxRecord};
use crate::harness::scene::{GroundTruth, SyntheticScene};
use crate::mil::ImageLabel;
use crate::tensor::Tensor;

const MANIFEST_HEADER: &str = "cpe-dataset 1";
const FEAT_MAGIC: &[u8] = b"CPE-FEAT-1\n";
const MAX_FEAT_VALUES: u64 = 1 << 26;

pub fn write_feature_map(w: &mut impl Write, fm: &FeatureMap) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    for d in [fm.channels(), fm.height(), fm.width()] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&fm.spatial_scale().to_le_bytes())?;
    for v in fm.values().data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature_map(r: &mut impl Read) -> Result<FeatureMap> {
    let mut magic = vec![0u8; FEAT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != FEAT_MAGIC {
        return Err(CpeError::InvalidInput("not a CPE feature map file".into()));
    }
    let mut b = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut b)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    r.read_exact(&mut b)?;
    let scale = f64::from_le_bytes(b);
    let total = dims.iter().map(|&d| d as u64).try_fold(1u64, |a, d| a.checked_mul(d));
    match total {
        Some(t) if t <= MAX_FEAT_VALUES => {}
        _ => return Err(CpeError::InvalidInput(format!("feature map dims {dims:?} too large"))),
    }
    let mut raw = vec![0u8; dims.iter().product::<usize>() * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    FeatureMap::new(Tensor::new(dims.to_vec(), data)?, scale)
}

fn stem(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene], classes: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("{MANIFEST_HEADER}\nclasses {classes}\n");
    for (i, s) in scenes.iter().enumerate() {
        let name = stem(i);
        let mut f = BufWriter::new(fs::File::create(dir.join(format!("{name}.feat")))?);
        write_feature_map(&mut f, &s.features)?;
        f.flush()?;
        let gts: Vec<BoxRecord> = s
            .ground_truth
            .iter()
            .map(|g| BoxRecord {
                class_id: Some(g.class_id),
                ..BoxRecord::new(g.bbox)
            })
            .collect();
        fs::write(dir.join(format!("{name}.gt.txt")), format_boxes(&gts))?;
        let props: Vec<BoxRecord> = s.proposals.iter().map(|&b| BoxRecord::new(b)).collect();
        fs::write(dir.join(format!("{name}.proposals.txt")), format_boxes(&props))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a dataset directory; returns the class count and the scenes.
pub fn read_dataset(dir: &Path) -> Result<(usize, Vec<SyntheticScene>)> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut lines = manifest.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(CpeError::Parse {
            line: 1,
            msg: format!("expected {MANIFEST_HEADER:?}"),
        });
    }
    let classes: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("classes "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| CpeError::Parse {
            line: 2,
            msg: "expected `classes <C>`".into(),
        })?;
    let mut scenes = Vec::new();
    for (id, name) in lines.enumerate() {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(CpeError::InvalidInput(format!("bad scene name {name:?}")));
        }
        let mut f = fs::File::open(dir.join(format!("{name}.feat")))?;
        let features = read_feature_map(&mut f)?;
        let gts = parse_boxes(&fs::read_to_string(dir.join(format!("{name}.gt.txt")))?)?;
        let ground_truth = gts
            .iter()
            .map(|r| {
                let class_id = r.class_id.filter(|&c| c < classes).ok_or_else(|| {
                    CpeError::InvalidInput(format!("{name}: ground truth needs a class id below {classes}"))
                })?;
                Ok(GroundTruth { bbox: r.bbox, class_id })
            })
            .collect::<Result<Vec<_>>>()?;
        let proposals: Vec<_> = parse_boxes(&fs::read_to_string(dir.join(format!("{name}.proposals.txt")))?)?
            .into_iter()
            .map(|r| r.bbox)
            .collect();
        let img = features.image_dims();
        if let Some(b) = proposals.iter().find(|b| !img.contains(b)) {
            return Err(CpeError::InvalidInput(format!(
                "{name}: proposal ({b}) outside the image"
            )));
        }
        let label = ImageLabel::from_classes(classes, ground_truth.iter().map(|g| g.class_id))?;
        scenes.push(SyntheticScene {
            id,
            features,
            ground_truth,
            parts: Vec::new(),
            kinds: Vec::new(),
            proposals,
            label,
        });
    }
    Ok((classes, scenes))
}
