//! Synthetic aerial benchmark: generation, augmentation and on-disk layout.
//!
//! ```text
//! <root>/manifest.txt        key = value lines
//! <root>/images/<id>_b0.png  bands 0..3 (RGB, 8-bit)
//! <root>/images/<id>_b1.png  band 3 (elevation, 8-bit grey), when present
//! <root>/labels/<id>.png     paletted class map
//! <root>/meta/<id>.txt       id, seed, size
//! ```

pub mod io;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};

pub use io::{read_label_png, read_png_bands, write_label_png, write_png_bands};

use crate::error::{Error, Result};
use crate::label::{LabelMap, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_BANDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub size: usize,
}

/// One scene: image `1 x bands x H x W` in `[0, 1]` plus its label map.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub meta: SampleMeta,
}

impl RasterSample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn bands(&self) -> usize {
        self.image.shape().c
    }

    /// Band 0 as bytes.
    pub fn band_bytes(&self, band: usize) -> Vec<u8> {
        let plane = self.image.shape().plane();
        self.image.data()[band * plane..(band + 1) * plane]
            .iter()
            .map(|&v| to_byte(v))
            .collect()
    }

    /// SHA-256 of band 0's bytes.
    pub fn band0_checksum(&self) -> String {
        hex::encode(Sha256::digest(self.band_bytes(0)))
    }
}

pub(crate) fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One draw of the crop-and-flip augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub y0: usize,
    pub x0: usize,
    pub crop: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Augmentation {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > height || crop > width {
            return Err(Error::InvalidArgument(format!(
                "crop {crop} larger than sample {height}x{width}"
            )));
        }
        Ok(Augmentation {
            y0: rng.gen_range(0..=height - crop),
            x0: rng.gen_range(0..=width - crop),
            crop,
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        })
    }

    pub fn apply(&self, s: &RasterSample) -> Result<RasterSample> {
        let mut image = s.image.crop(self.y0, self.x0, self.crop, self.crop)?;
        let mut labels = s.labels.crop(self.y0, self.x0, self.crop, self.crop)?;
        if self.flip_h {
            image = image.flip_horizontal();
            labels = labels.flip_horizontal();
        }
        if self.flip_v {
            image = image.flip_vertical();
            labels = labels.flip_vertical();
        }
        Ok(RasterSample {
            image,
            labels,
            meta: s.meta.clone(),
        })
    }

    /// Source coordinate of output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let y = if self.flip_v { self.crop - 1 - y } else { y };
        let x = if self.flip_h { self.crop - 1 - x } else { x };
        (self.y0 + y, self.x0 + x)
    }
}

/// Random crop to `crop x crop` with independent horizontal and vertical flips.
pub fn augment<R: Rng + ?Sized>(sample: &RasterSample, crop: usize, rng: &mut R) -> Result<RasterSample> {
    Augmentation::draw(rng, sample.height(), sample.width(), crop)?.apply(sample)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (valid: train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub bands: usize,
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Band-0 checksum per id.
    pub checksums: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn split(&self, split: &Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids().any(|i| i == id)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "version = {MANIFEST_VERSION}\nseed = {}\nsize = {}\nbands = {}\nclasses = {}\ntrain = {}\nval = {}\ntest = {}\n",
            self.seed,
            self.size,
            self.bands,
            self.classes.join(","),
            self.train.join(","),
            self.val.join(","),
            self.test.join(","),
        );
        for (id, sum) in &self.checksums {
            s.push_str(&format!("checksum.{id} = {sum}\n"));
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let path = root.join("manifest.txt");
        let bad = |m: String| Error::format(&path, m);
        let mut kv = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(id) = k.strip_prefix("checksum.") {
                checksums.insert(id.to_string(), v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("`{k}` is not an integer"))) };
        let list = |k: &str| -> Result<Vec<String>> {
            Ok(get(k)?
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect())
        };
        let version = num("version")?;
        if version != MANIFEST_VERSION as u64 {
            return Err(bad(format!("unsupported manifest version {version}")));
        }
        let m = DatasetManifest {
            root: root.to_path_buf(),
            seed: num("seed")?,
            size: num("size")? as usize,
            bands: num("bands")? as usize,
            classes: list("classes")?,
            train: list("train")?,
            val: list("val")?,
            test: list("test")?,
            checksums,
        };
        let mut seen = std::collections::BTreeSet::new();
        for id in m.ids() {
            if !seen.insert(id) {
                return Err(bad(format!("duplicate id `{id}`")));
            }
        }
        if m.classes.len() != NUM_CLASSES {
            return Err(bad(format!(
                "expected {NUM_CLASSES} classes, found {}",
                m.classes.len()
            )));
        }
        if !(1..=DEFAULT_BANDS).contains(&m.bands) {
            return Err(bad(format!("band count {} outside 1..={DEFAULT_BANDS}", m.bands)));
        }
        Ok(m)
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(root, &text)
    }
}

/// File paths of one sample's band groups.
pub fn band_files(root: &Path, id: &str, bands: usize) -> Vec<PathBuf> {
    let groups = if bands > 3 { 2 } else { 1 };
    (0..groups)
        .map(|g| root.join("images").join(format!("{id}_b{g}.png")))
        .collect()
}

pub fn label_file(root: &Path, id: &str) -> PathBuf {
    root.join("labels").join(format!("{id}.png"))
}

fn meta_file(root: &Path, id: &str) -> PathBuf {
    root.join("meta").join(format!("{id}.txt"))
}

pub fn save_sample(sample: &RasterSample, root: &Path) -> Result<()> {
    for dir in ["images", "labels", "meta"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let id = &sample.meta.id;
    let files = band_files(root, id, sample.bands());
    let (h, w) = (sample.height(), sample.width());
    let bytes: Vec<Vec<u8>> = (0..sample.bands()).map(|b| sample.band_bytes(b)).collect();
    write_png_bands(&files[0], w, h, &bytes[..sample.bands().min(3)])?;
    if sample.bands() > 3 {
        write_png_bands(&files[1], w, h, &bytes[3..])?;
    }
    write_label_png(&label_file(root, id), &sample.labels)?;
    let meta = format!(
        "id = {}\nseed = {}\nsize = {}\n",
        id, sample.meta.seed, sample.meta.size
    );
    let mp = meta_file(root, id);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<RasterSample> {
    if !manifest.contains(id) {
        return Err(Error::InvalidArgument(format!("unknown sample id `{id}`")));
    }
    let root = &manifest.root;
    let files = band_files(root, id, manifest.bands);
    let image = read_image(&files)?;
    if image.shape().c != manifest.bands {
        return Err(Error::format(
            &files[0],
            format!(
                "{} bands on disk, manifest declares {}",
                image.shape().c,
                manifest.bands
            ),
        ));
    }
    let lp = label_file(root, id);
    let labels = read_label_png(&lp)?;
    if (labels.height(), labels.width()) != (image.shape().h, image.shape().w) {
        return Err(Error::format(&lp, "label map and image sizes differ"));
    }
    if labels.max_label() as usize >= NUM_CLASSES {
        return Err(Error::format(&lp, format!("label {} out of range", labels.max_label())));
    }
    let mp = meta_file(root, id);
    let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut meta = SampleMeta {
        id: id.to_string(),
        seed: manifest.seed,
        size: image.shape().h,
    };
    for line in meta_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "seed" => meta.seed = v.trim().parse().map_err(|_| Error::format(&mp, "bad seed"))?,
                "size" => meta.size = v.trim().parse().map_err(|_| Error::format(&mp, "bad size"))?,
                _ => {}
            }
        }
    }
    Ok(RasterSample { image, labels, meta })
}

/// Every sample of `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: &Split) -> Result<Vec<RasterSample>> {
    manifest
        .split(split)
        .iter()
        .map(|id| load_sample(manifest, id))
        .collect()
}

/// Reads and channel-concatenates a set of band-group PNGs.
pub fn read_image(files: &[PathBuf]) -> Result<Tensor<f32>> {
    let mut groups = Vec::new();
    for f in files {
        let (w, h, bands) = read_png_bands(f)?;
        let data = bands.iter().flatten().map(|&b| b as f32 / 255.0).collect();
        groups.push(Tensor::from_vec(Shape::new(1, bands.len(), h, w), data)?);
    }
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no image files given".into()));
    }
    Tensor::concat_channels(&groups).map_err(|_| Error::format(&files[0], "band files differ in size"))
}

/// Generates `count` scenes into `out_dir` and writes the manifest.
pub fn synth_generate(seed: u64, count: usize, size: usize, bands: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::InvalidArgument(format!(
            "size {size} must be a positive multiple of 16"
        )));
    }
    if !(3..=DEFAULT_BANDS).contains(&bands) {
        return Err(Error::InvalidArgument(format!("bands {bands} must be 3 or 4")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ids: Vec<String> = (0..count).map(synth::sample_id).collect();
    let n_train = ((count as f64) * 0.7).round() as usize;
    let n_val = ((count as f64) * 0.1).round() as usize;
    let mut checksums = BTreeMap::new();
    for i in 0..count {
        let s = synth::generate_scene(seed, i, size, bands);
        checksums.insert(s.meta.id.clone(), s.band0_checksum());
        save_sample(&s, out_dir)?;
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed,
        size,
        bands,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        train: ids[..n_train].to_vec(),
        val: ids[n_train..(n_train + n_val).min(count)].to_vec(),
        test: ids[(n_train + n_val).min(count)..].to_vec(),
        checksums,
    };
    let mp = out_dir.join("manifest.txt");
    fs::write(&mp, manifest.render()).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// SHA-256 over every file of a dataset, in sorted path order.
pub fn dataset_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> RasterSample {
        synth::generate_scene(5, 0, 64, 4)
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let a = Augmentation {
            y0: 0,
            x0: 0,
            crop: 64,
            flip_h: true,
            flip_v: true,
        };
        assert_eq!(a.apply(&a.apply(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn augment_crops_and_follows_coordinate_map() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = Augmentation::draw(&mut rng, 64, 64, 32).unwrap();
            let out = a.apply(&s).unwrap();
            assert_eq!((out.height(), out.width()), (32, 32));
            for y in 0..32 {
                for x in 0..32 {
                    let (sy, sx) = a.source(y, x);
                    assert_eq!(out.labels.get(y, x), s.labels.get(sy, sx));
                    assert_eq!(out.image.at(0, 3, y, x), s.image.at(0, 3, sy, sx));
                }
            }
        }
        assert!(augment(&s, 65, &mut rng).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates() {
        let text = "version = 1\nseed = 1\nsize = 64\nbands = 4\nclasses = a,b,c,d,e,f\ntrain = 0000,0001\nval = 0001\ntest =\n";
        assert!(DatasetManifest::parse(Path::new("x"), text).is_err());
        let ok = text.replace("val = 0001", "val = 0002");
        let m = DatasetManifest::parse(Path::new("x"), &ok).unwrap();
        assert!(m.test.is_empty());
        assert_eq!(DatasetManifest::parse(Path::new("x"), &m.render()).unwrap(), m);
    }
}
