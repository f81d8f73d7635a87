//! In-memory datasets, the on-disk manifest format, deterministic batching
//! and procedural generators for small synthetic domains.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_dtb_file, write_dtb_file, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub split: Split,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        split: Split,
        images: Tensor<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let (n, ..) = images
            .dims4()
            .map_err(|e| Error::Format(format!("images: {e}")))?;
        if labels.len() != n {
            return Err(Error::Format(format!(
                "labels: {} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!(
                "labels: label {bad} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }
}

/// One shuffled epoch of index batches; the final partial batch is kept.
/// The order depends only on `(seed, epoch)`.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).derive(epoch as u64).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Sequential batches without shuffling (evaluation).
pub fn sequential(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub images: String,
    pub labels: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub splits: BTreeMap<String, SplitEntry>,
}

/// Splits of one domain as read from a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub name: String,
    pub num_classes: usize,
    pub splits: BTreeMap<Split, Dataset>,
}

impl DomainData {
    pub fn split(&self, s: Split) -> Result<&Dataset> {
        self.splits
            .get(&s)
            .ok_or_else(|| Error::Data(format!("domain `{}` has no {} split", self.name, s.name())))
    }
}

fn normalize_channels(images: &mut Tensor<f32>) -> Result<()> {
    if images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        return Ok(());
    }
    let (n, c, h, w) = images.dims4()?;
    let hw = h * w;
    for ch in 0..c {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for b in 0..n {
            for &v in &images.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for b in 0..n {
            for v in &mut images.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *v = (*v - lo) / span;
            }
        }
    }
    Ok(())
}

fn labels_from_tensor(t: &Tensor<f32>, field: &str) -> Result<Vec<usize>> {
    if t.rank() != 1 {
        return Err(Error::Format(format!(
            "{field}: labels must be rank 1, got {:?}",
            t.shape()
        )));
    }
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!(
                    "{field}: label value {v} is not a non-negative integer"
                )))
            }
        })
        .collect()
}

/// Reads a manifest and every split it lists.
pub fn load_dataset(manifest_path: &Path) -> Result<DomainData> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if m.num_classes < 2 {
        return Err(Error::Format(format!("num_classes: {} < 2", m.num_classes)));
    }
    let mut splits = BTreeMap::new();
    for (sname, e) in &m.splits {
        let split = Split::parse(sname)?;
        let mut images: Tensor<f32> = read_dtb_file(&dir.join(&e.images))?;
        let labels = labels_from_tensor(
            &read_dtb_file(&dir.join(&e.labels))?,
            &format!("splits.{sname}.labels"),
        )?;
        let n = images.shape()[0];
        if n != e.count || labels.len() != e.count {
            return Err(Error::Format(format!(
                "splits.{sname}.count: manifest says {}, images have {n}, labels have {}",
                e.count,
                labels.len()
            )));
        }
        let (_, _, h, w) = images
            .dims4()
            .map_err(|e| Error::Format(format!("splits.{sname}.images: {e}")))?;
        if h != w {
            return Err(Error::Format(format!(
                "splits.{sname}.images: images must be square, got {h}x{w}"
            )));
        }
        normalize_channels(&mut images)?;
        let ds =
            Dataset::new(m.name.clone(), m.num_classes, split, images, labels).map_err(|e| {
                Error::Format(format!(
                    "splits.{sname}.{}",
                    e.to_string().trim_start_matches("format: ")
                ))
            })?;
        splits.insert(split, ds);
    }
    if splits.is_empty() {
        return Err(Error::Format("splits: manifest lists no splits".into()));
    }
    Ok(DomainData {
        name: m.name,
        num_classes: m.num_classes,
        splits,
    })
}

/// Writes the given splits as DTB files plus `manifest.json` into `dir`.
pub fn save_dataset(dir: &Path, splits: &[&Dataset]) -> Result<PathBuf> {
    let first = splits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no splits to save".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = BTreeMap::new();
    for ds in splits {
        let s = ds.split.name();
        let images = format!("{s}_images.dtb");
        let labels = format!("{s}_labels.dtb");
        write_dtb_file(&dir.join(&images), &ds.images)?;
        let lt = Tensor::from_vec(&[ds.len()], ds.labels.iter().map(|&y| y as f32).collect())?;
        write_dtb_file(&dir.join(&labels), &lt)?;
        entries.insert(
            s.to_string(),
            SplitEntry {
                images,
                labels,
                count: ds.len(),
            },
        );
    }
    let m = Manifest {
        name: first.name.clone(),
        num_classes: first.num_classes,
        splits: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Blobs,
    Stripes,
    Polygons,
    DigitsGrid,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Blobs,
        SynthKind::Stripes,
        SynthKind::Polygons,
        SynthKind::DigitsGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Blobs => "blobs",
            SynthKind::Stripes => "stripes",
            SynthKind::Polygons => "polygons",
            SynthKind::DigitsGrid => "digits-grid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown generator `{s}`")))
    }

    /// Number of distinct class patterns the generator can draw.
    pub fn capacity(self) -> usize {
        match self {
            SynthKind::Blobs => 18,
            SynthKind::Stripes => 18,
            SynthKind::Polygons => 12,
            SynthKind::DigitsGrid => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub num_classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, num_classes: usize, seed: u64) -> Self {
        Self {
            kind,
            num_classes,
            train: 2000,
            test: 500,
            size: 32,
            noise: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes > self.kind.capacity() {
            return Err(Error::Capacity {
                kind: self.kind.name(),
                max: self.kind.capacity(),
                requested: self.num_classes,
            });
        }
        if self.num_classes < 2 || self.train == 0 || self.test == 0 {
            return Err(Error::Config(
                "synthetic domains need >= 2 classes and non-empty splits".into(),
            ));
        }
        if self.size < 8 {
            return Err(Error::Config(format!(
                "synthetic image size {} < 8",
                self.size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!(
                "noise level {} must be >= 0",
                self.noise
            )));
        }
        Ok(())
    }
}

const DIGITS: [[u8; 15]; 10] = [
    [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1],
];

/// Foreground mask in `[0, 1]` for one example of `class`.
fn pattern(kind: SynthKind, class: usize, s: usize, rng: &mut Rng) -> Vec<f64> {
    let sf = s as f64;
    let mut m = vec![0.0; s * s];
    match kind {
        SynthKind::Blobs => {
            let (cell, big) = (class % 9, class / 9);
            let cx = (cell % 3) as f64 * sf / 3.0 + sf / 6.0 + rng.range(-0.04, 0.04) * sf;
            let cy = (cell / 3) as f64 * sf / 3.0 + sf / 6.0 + rng.range(-0.04, 0.04) * sf;
            let sigma = if big == 1 { 0.13 } else { 0.06 } * sf * rng.range(0.9, 1.1);
            for y in 0..s {
                for x in 0..s {
                    let r2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    m[y * s + x] = (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        SynthKind::Stripes => {
            let theta = (class % 6) as f64 * PI / 6.0 + rng.range(-0.05, 0.05);
            let cycles = [2.0, 4.0, 7.0][class / 6] * rng.range(0.95, 1.05);
            let phase = rng.range(0.0, PI / 3.0);
            let (c, sn) = (theta.cos(), theta.sin());
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 * c + y as f64 * sn) / sf;
                    m[y * s + x] = 0.5 + 0.5 * (2.0 * PI * cycles * u + phase).sin();
                }
            }
        }
        SynthKind::Polygons => {
            let v = 3 + class % 6;
            let filled = class < 6;
            let rot = rng.range(0.0, 2.0 * PI);
            let radius = rng.range(0.28, 0.38) * sf;
            let cx = sf / 2.0 + rng.range(-0.06, 0.06) * sf;
            let cy = sf / 2.0 + rng.range(-0.06, 0.06) * sf;
            let sector = 2.0 * PI / v as f64;
            let half_width = (sf / 32.0).max(1.0);
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let r = dx.hypot(dy);
                    let phi = (dy.atan2(dx) - rot).rem_euclid(sector);
                    let edge = radius * (PI / v as f64).cos() / (phi - sector / 2.0).cos();
                    m[y * s + x] = if filled {
                        (r <= edge) as u8 as f64
                    } else {
                        ((r - edge).abs() <= half_width) as u8 as f64
                    };
                }
            }
        }
        SynthKind::DigitsGrid => {
            let bits = &DIGITS[class];
            let cell = (s / 8).max(1);
            let (gw, gh) = (3 * cell, 5 * cell);
            let jitter =
                |rng: &mut Rng, room: usize| rng.below(room / 4 + 1) as isize - (room / 8) as isize;
            let ox = ((s - gw) / 2) as isize + jitter(rng, s - gw);
            let oy = ((s - gh) / 2) as isize + jitter(rng, s - gh);
            for (i, &on) in bits.iter().enumerate() {
                if on == 0 {
                    continue;
                }
                let (r, c) = (i / 3, i % 3);
                for y in 0..cell {
                    for x in 0..cell {
                        let py = oy + (r * cell + y) as isize;
                        let px = ox + (c * cell + x) as isize;
                        if (0..s as isize).contains(&py) && (0..s as isize).contains(&px) {
                            m[py as usize * s + px as usize] = 1.0;
                        }
                    }
                }
            }
        }
    }
    m
}

fn render(spec: &SynthSpec, class: usize, rng: &mut Rng) -> Vec<f32> {
    let s = spec.size;
    let mask = pattern(spec.kind, class, s, rng);
    let bg: Vec<f64> = (0..3).map(|_| rng.range(0.0, 0.35)).collect();
    let fg: Vec<f64> = (0..3).map(|_| rng.range(0.55, 1.0)).collect();
    let mut out = Vec::with_capacity(3 * s * s);
    for ch in 0..3 {
        for &mv in &mask {
            let v = bg[ch] + (fg[ch] - bg[ch]) * mv + 0.3 * spec.noise * rng.normal();
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    out
}

fn generate_split(spec: &SynthSpec, name: &str, split: Split, count: usize) -> Result<Dataset> {
    let stream = Rng::new(spec.seed).derive(1 + split as u64);
    let s = spec.size;
    let mut data = Vec::with_capacity(count * 3 * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % spec.num_classes;
        let mut rng = stream.derive(i as u64);
        data.extend(render(spec, class, &mut rng));
        labels.push(class);
    }
    Dataset::new(
        name,
        spec.num_classes,
        split,
        Tensor::from_vec(&[count, 3, s, s], data)?,
        labels,
    )
}

/// Train and test splits for a synthetic domain, drawn from disjoint seed
/// streams. Classes are balanced and interleaved.
pub fn generate_synth(name: &str, spec: &SynthSpec) -> Result<DomainData> {
    spec.validate()?;
    let mut splits = BTreeMap::new();
    splits.insert(
        Split::Train,
        generate_split(spec, name, Split::Train, spec.train)?,
    );
    splits.insert(
        Split::Test,
        generate_split(spec, name, Split::Test, spec.test)?,
    );
    Ok(DomainData {
        name: name.to_string(),
        num_classes: spec.num_classes,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(kind: SynthKind, noise: f64) -> SynthSpec {
        SynthSpec {
            kind,
            num_classes: 10,
            train: 60,
            test: 20,
            size: 16,
            noise,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in SynthKind::ALL {
            let a = generate_synth("x", &small(kind, 0.2)).unwrap();
            let b = generate_synth("x", &small(kind, 0.2)).unwrap();
            let t = a.split(Split::Train).unwrap();
            assert_eq!(
                t.images.checksum(),
                b.split(Split::Train).unwrap().images.checksum()
            );
            assert!(t.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn capacity_enforced() {
        let mut s = small(SynthKind::DigitsGrid, 0.0);
        s.num_classes = 11;
        assert!(matches!(
            generate_synth("d", &s),
            Err(Error::Capacity { max: 10, .. })
        ));
        s.kind = SynthKind::Polygons;
        s.num_classes = 13;
        assert!(matches!(
            generate_synth("d", &s),
            Err(Error::Capacity { max: 12, .. })
        ));
    }

    #[test]
    fn noise_raises_pixel_variance() {
        let var = |noise| {
            let d = generate_synth("b", &small(SynthKind::Blobs, noise)).unwrap();
            let x = &d.split(Split::Train).unwrap().images;
            let per = 3 * 16 * 16;
            // one corner pixel, far from every blob centre
            let v: Vec<f64> = (0..x.shape()[0])
                .map(|i| x.data()[i * per] as f64)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(1.0) > var(0.0));
    }

    #[test]
    fn splits_do_not_collide() {
        let d = generate_synth("p", &small(SynthKind::Polygons, 0.1)).unwrap();
        let per = 3 * 16 * 16;
        let key = |ds: &Dataset, i: usize| -> Vec<u32> {
            ds.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        let tr = d.split(Split::Train).unwrap();
        let te = d.split(Split::Test).unwrap();
        let seen: HashSet<Vec<u32>> = (0..tr.len()).map(|i| key(tr, i)).collect();
        assert!((0..te.len()).all(|i| !seen.contains(&key(te, i))));
    }

    #[test]
    fn batching_contract() {
        let b = batches(10, 3, 7, 0);
        assert_eq!(b.len(), 4);
        assert_eq!(b[3].len(), 1);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches(10, 3, 7, 0), b);
        assert_ne!(batches(10, 3, 7, 1), b);
        assert_eq!(batches(10, 64, 7, 0).len(), 1);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synth("blobs", &small(SynthKind::Blobs, 0.1)).unwrap();
        let tr = d.split(Split::Train).unwrap();
        let te = d.split(Split::Test).unwrap();
        let path = save_dataset(dir.path(), &[tr, te]).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);

        // label out of range
        let bad = Tensor::<f32>::from_vec(&[tr.len()], vec![10.0; tr.len()]).unwrap();
        write_dtb_file(&dir.path().join("train_labels.dtb"), &bad).unwrap();
        let e = load_dataset(&path).unwrap_err();
        assert!(
            matches!(e, Error::Format(ref m) if m.contains("labels")),
            "{e}"
        );

        fs::remove_file(dir.path().join("test_images.dtb")).unwrap();
        let e = load_dataset(&path).unwrap_err();
        assert!(e.to_string().contains("test_images.dtb"), "{e}");
    }
}
