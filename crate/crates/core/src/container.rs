//! On-disk array container.
//!
//! A container is a directory holding `manifest.txt` plus one raw
//! little-endian blob per tensor (`<name>.bin`, row-major). The manifest is
//! plain text:
//!
//! ```text
//! dvsci-container 1
//! meta <key> <value>
//! tensor <name> <f32|u8> <dim0,dim1,...> <axis order> little
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3, IxDyn};

use crate::amplifier::DiversityBundle;
use crate::error::{Error, Result};
use crate::sensing::{MaskSet, Measurement, MeasurementMeta, VideoCube, ViewId};

const MAGIC: &str = "dvsci-container 1";
pub const MANIFEST: &str = "manifest.txt";

/// Axis order tag for video cubes and mask stacks.
pub const ORDER_CUBE: &str = "frame,row,col";
pub const ORDER_IMAGE: &str = "row,col";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: TensorData,
    pub order: String,
}

impl Tensor {
    fn dtype(&self) -> &'static str {
        match self.data {
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
        }
    }

    fn shape(&self) -> &[usize] {
        match &self.data {
            TensorData::F32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Container {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert_f32(&mut self, name: &str, data: ArrayD<f32>, order: &str) {
        self.tensors.insert(
            name.to_string(),
            Tensor {
                data: TensorData::F32(data.as_standard_layout().into_owned()),
                order: order.to_string(),
            },
        );
    }

    pub fn insert_u8(&mut self, name: &str, data: ArrayD<u8>, order: &str) {
        self.tensors.insert(
            name.to_string(),
            Tensor {
                data: TensorData::U8(data.as_standard_layout().into_owned()),
                order: order.to_string(),
            },
        );
    }

    pub fn f32(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.tensors.get(name).map(|t| &t.data) {
            Some(TensorData::F32(a)) => Ok(a),
            Some(_) => Err(Error::Shape(format!("tensor {name} is not f32"))),
            None => Err(Error::Shape(format!("tensor {name} missing from container"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&ArrayD<u8>> {
        match self.tensors.get(name).map(|t| &t.data) {
            Some(TensorData::U8(a)) => Ok(a),
            Some(_) => Err(Error::Shape(format!("tensor {name} is not u8"))),
            None => Err(Error::Shape(format!("tensor {name} missing from container"))),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            if !valid_name(k) || v.contains('\n') {
                return Err(malformed(dir, format!("invalid meta entry {k:?}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if !valid_name(name) || t.order.contains(char::is_whitespace) {
                return Err(malformed(dir, format!("invalid tensor name {name:?}")));
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor {name} {} {} {} little\n",
                t.dtype(),
                shape.join(","),
                t.order
            ));
            let bytes: Vec<u8> = match &t.data {
                TensorData::F32(a) => a.iter().flat_map(|v| v.to_le_bytes()).collect(),
                TensorData::U8(a) => a.iter().copied().collect(),
            };
            fs::write(dir.join(format!("{name}.bin")), bytes)?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path)?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(malformed(dir, "bad magic line"));
        }
        let mut out = Container::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| malformed(dir, format!("bad line {line:?}")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    out.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 5 || f[4] != "little" {
                        return Err(malformed(dir, format!("bad tensor line {line:?}")));
                    }
                    let shape: Vec<usize> = if f[2].is_empty() {
                        vec![]
                    } else {
                        f[2].split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| malformed(dir, format!("bad shape {:?}", f[2])))?
                    };
                    let n: usize = shape.iter().product();
                    let blob_path = dir.join(format!("{}.bin", f[0]));
                    if !blob_path.exists() {
                        return Err(Error::MissingFile(blob_path));
                    }
                    let bytes = fs::read(&blob_path)?;
                    let data = match f[1] {
                        "f32" => {
                            if bytes.len() != 4 * n {
                                return Err(malformed(dir, format!("blob {} has wrong length", f[0])));
                            }
                            let v: Vec<f32> = bytes
                                .chunks_exact(4)
                                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                                .collect();
                            TensorData::F32(
                                ArrayD::from_shape_vec(IxDyn(&shape), v).map_err(|e| malformed(dir, e.to_string()))?,
                            )
                        }
                        "u8" => {
                            if bytes.len() != n {
                                return Err(malformed(dir, format!("blob {} has wrong length", f[0])));
                            }
                            TensorData::U8(
                                ArrayD::from_shape_vec(IxDyn(&shape), bytes)
                                    .map_err(|e| malformed(dir, e.to_string()))?,
                            )
                        }
                        other => return Err(malformed(dir, format!("unknown dtype {other}"))),
                    };
                    out.tensors.insert(
                        f[0].to_string(),
                        Tensor {
                            data,
                            order: f[3].to_string(),
                        },
                    );
                }
                other => return Err(malformed(dir, format!("unknown entry kind {other}"))),
            }
        }
        Ok(out)
    }

    fn parse_meta<T: std::str::FromStr>(&self, dir: &Path, key: &str) -> Result<T> {
        self.meta(key)
            .ok_or_else(|| malformed(dir, format!("missing meta {key}")))?
            .parse()
            .map_err(|_| malformed(dir, format!("unparsable meta {key}")))
    }
}

pub fn cube3(c: &Container, name: &str) -> Result<Array3<f32>> {
    c.f32(name)?
        .clone()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Shape(format!("tensor {name} is not 3-D")))
}

pub fn image2(c: &Container, name: &str) -> Result<Array2<f32>> {
    c.f32(name)?
        .clone()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("tensor {name} is not 2-D")))
}

pub fn save_cubes(dir: &Path, cubes: &[&VideoCube], extra_meta: &[(&str, String)]) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", "video");
    for (i, cube) in cubes.iter().enumerate() {
        let name = format!("x{}", i + 1);
        c.insert_f32(&name, cube.data().clone().into_dyn(), ORDER_CUBE);
        c.set_meta(&format!("{name}.view"), cube.view().as_str());
    }
    for (k, v) in extra_meta {
        c.set_meta(k, v);
    }
    c.write(dir)
}

pub fn load_cubes(dir: &Path) -> Result<Vec<VideoCube>> {
    let c = Container::read(dir)?;
    let mut out = Vec::new();
    for i in 1.. {
        let name = format!("x{i}");
        if !c.tensors.contains_key(&name) {
            break;
        }
        let view = c
            .meta(&format!("{name}.view"))
            .and_then(ViewId::parse)
            .unwrap_or(if i == 1 { ViewId::One } else { ViewId::Two });
        out.push(VideoCube::new(cube3(&c, &name)?, view)?);
    }
    if out.is_empty() {
        return Err(malformed(dir, "no video tensors"));
    }
    Ok(out)
}

/// Saves raw (possibly out-of-range) reconstructions.
pub fn save_estimates(dir: &Path, views: &[Array3<f32>], meta: &[(&str, String)]) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", "estimate");
    for (i, v) in views.iter().enumerate() {
        c.insert_f32(&format!("x{}", i + 1), v.clone().into_dyn(), ORDER_CUBE);
    }
    for (k, v) in meta {
        c.set_meta(k, v);
    }
    c.write(dir)
}

pub fn load_estimates(dir: &Path) -> Result<Vec<Array3<f32>>> {
    let c = Container::read(dir)?;
    let mut out = Vec::new();
    for i in 1.. {
        let name = format!("x{i}");
        if !c.tensors.contains_key(&name) {
            break;
        }
        out.push(cube3(&c, &name)?);
    }
    if out.is_empty() {
        return Err(malformed(dir, "no estimate tensors"));
    }
    Ok(out)
}

fn to_u8(a: &Array3<f32>) -> ArrayD<u8> {
    a.mapv(|v| v as u8).into_dyn()
}

pub fn save_masks(dir: &Path, masks: &MaskSet) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", "masks");
    c.set_meta("shift_row", masks.shift().0);
    c.set_meta("shift_col", masks.shift().1);
    c.set_meta("density", masks.density());
    c.set_meta("seed", masks.seed());
    c.set_meta("reference", masks.reference());
    c.insert_u8("c1", to_u8(masks.c1()), ORDER_CUBE);
    c.insert_u8("c2", to_u8(masks.c2()), ORDER_CUBE);
    c.write(dir)
}

pub fn load_masks(dir: &Path) -> Result<MaskSet> {
    let c = Container::read(dir)?;
    let c1 = c
        .u8("c1")?
        .mapv(|v| v as f32)
        .into_dimensionality::<Ix3>()
        .map_err(|_| malformed(dir, "c1 is not 3-D"))?;
    let shift = (c.parse_meta(dir, "shift_row")?, c.parse_meta(dir, "shift_col")?);
    let masks = MaskSet::from_primary(c1, shift, c.parse_meta(dir, "density")?, c.parse_meta(dir, "seed")?)?;
    if let Ok(c2) = c.u8("c2") {
        if c2.mapv(|v| v as f32) != masks.c2().clone().into_dyn() {
            return Err(malformed(dir, "stored c2 is not the declared shift of c1"));
        }
    }
    Ok(masks)
}

pub fn save_measurement(dir: &Path, y: &Measurement, extra_meta: &[(&str, String)]) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", "measurement");
    c.set_meta("frames_per_view", y.meta.frames_per_view);
    c.set_meta("views", y.meta.views);
    c.set_meta("mask_ref", &y.meta.mask_ref);
    c.set_meta("noise_sigma", y.meta.noise_sigma);
    c.set_meta("normalized", y.meta.normalized);
    c.set_meta("scale", f32_to_meta(y.meta.scale));
    for (k, v) in extra_meta {
        c.set_meta(k, v);
    }
    c.insert_f32("y", y.y.clone().into_dyn(), ORDER_IMAGE);
    c.write(dir)
}

pub fn load_measurement(dir: &Path) -> Result<Measurement> {
    let c = Container::read(dir)?;
    let scale_bits: String = c.parse_meta(dir, "scale")?;
    Ok(Measurement {
        y: image2(&c, "y")?,
        meta: MeasurementMeta {
            frames_per_view: c.parse_meta(dir, "frames_per_view")?,
            views: c.parse_meta(dir, "views")?,
            mask_ref: c.meta("mask_ref").unwrap_or_default().to_string(),
            noise_sigma: c.parse_meta(dir, "noise_sigma")?,
            normalized: c.parse_meta(dir, "normalized")?,
            scale: f32_from_meta(&scale_bits).ok_or_else(|| malformed(dir, "bad scale"))?,
        },
    })
}

/// Bit-exact text encoding of an `f32`.
fn f32_to_meta(v: f32) -> String {
    format!("0x{:08x}", v.to_bits())
}

fn f32_from_meta(s: &str) -> Option<f32> {
    u32::from_str_radix(s.strip_prefix("0x")?, 16).ok().map(f32::from_bits)
}

pub fn save_bundle(dir: &Path, bundle: &DiversityBundle) -> Result<()> {
    let mut c = Container::new();
    c.set_meta("kind", "diversity");
    c.set_meta("smoothing_sigma", bundle.smoothing.sigma);
    c.set_meta("smoothing_radius", bundle.smoothing.radius);
    c.set_meta("degenerate_pixels", bundle.degenerate_pixels);
    for (name, img) in [
        ("ybar", &bundle.ybar),
        ("d1", &bundle.d1),
        ("d2", &bundle.d2),
        ("d3", &bundle.d3),
        ("d4", &bundle.d4),
    ] {
        c.insert_f32(name, img.clone().into_dyn(), ORDER_IMAGE);
    }
    c.write(dir)
}

/// 8-bit grayscale preview, clamped to `[0, 1]`.
pub fn export_png(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (rows, cols) = img.dim();
    let buf: Vec<u8> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let out = image::GrayImage::from_raw(cols as u32, rows as u32, buf).expect("buffer sized to image");
    out.save(path)?;
    Ok(())
}

/// Preview of a signed image rescaled by its own range.
pub fn export_png_autoscale(path: &Path, img: &Array2<f32>) -> Result<()> {
    let lo = img.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    export_png(path, &img.mapv(|v| (v - lo) / span))
}
