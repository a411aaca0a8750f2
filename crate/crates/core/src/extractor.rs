//! Frozen feature extractors for the perceptual loss.
//!
//! [`PerceptualExtractor::Vgg`] runs a plain conv/ReLU/max-pool stack loaded
//! from a safetensors file with torchvision-style names
//! (`features.<index>.weight` in `[out, in, 3, 3]` order, `features.<index>.bias`).
//! Without metadata the file must hold the 19-layer configuration and
//! features are taken at `relu5_4`. A file may declare another stack through the
//! `nuigo.vgg_cfg` metadata key (comma-separated channel counts, `M` for pooling)
//! and another cut point through `nuigo.layer`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d, conv2d_backward, max_pool2, max_pool2_backward, relu_backward, relu_inplace, Conv2d,
};
use crate::tensor::{Real, Tensor};

/// The 19-layer configuration; numbers are conv output channels, `M` is 2× max pooling.
pub const VGG19_CFG: &str =
    "64,64,M,128,128,M,256,256,256,256,M,512,512,512,512,M,512,512,512,512,M";
pub const DEFAULT_LAYER: &str = "relu5_4";
/// Channel statistics of the ImageNet-trained torchvision weights.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
enum CfgItem {
    Conv(usize),
    Pool,
}

fn parse_cfg(cfg: &str) -> Result<Vec<CfgItem>> {
    cfg.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            if s.eq_ignore_ascii_case("m") {
                Ok(CfgItem::Pool)
            } else {
                s.parse::<usize>()
                    .ok()
                    .filter(|&c| c > 0)
                    .map(CfgItem::Conv)
                    .ok_or_else(|| Error::Extractor(format!("bad layer entry {s:?} in {cfg:?}")))
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Layer<T> {
    /// Convolution followed by a rectifier.
    ConvRelu(Conv2d<T>),
    Pool,
}

#[derive(Clone, Debug)]
pub struct VggFeatures<T> {
    layers: Vec<Layer<T>>,
    mean: [f64; 3],
    std: [f64; 3],
    layer_name: String,
}

enum Trace<T> {
    ConvRelu { input: Tensor<T>, output: Tensor<T> },
    Pool { shape: [usize; 4], arg: Vec<u32> },
}

impl<T: Real> VggFeatures<T> {
    /// Builds a stack directly from layer weights (used by tests and tools).
    pub fn from_convs(cfg: &str, layer: &str, convs: Vec<Conv2d<T>>) -> Result<Self> {
        let items = parse_cfg(cfg)?;
        let mut convs = convs.into_iter();
        let mut layers = Vec::new();
        for item in items {
            match item {
                CfgItem::Conv(_) => layers.push(Layer::ConvRelu(
                    convs
                        .next()
                        .ok_or_else(|| Error::Extractor("too few convolutions".into()))?,
                )),
                CfgItem::Pool => layers.push(Layer::Pool),
            }
        }
        let keep = cut_index(&layers, layer)?;
        layers.truncate(keep);
        Ok(VggFeatures {
            layers,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            layer_name: layer.to_string(),
        })
    }

    pub fn layer_name(&self) -> &str {
        &self.layer_name
    }

    pub fn with_normalization(mut self, mean: [f64; 3], std: [f64; 3]) -> Self {
        self.mean = mean;
        self.std = std;
        self
    }

    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = x.clone();
        for px in out.data.chunks_exact_mut(3) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (*v - T::lit(self.mean[c])) / T::lit(self.std[c]);
            }
        }
        out
    }

    fn run(&self, x: &Tensor<T>, mut trace: Option<&mut Vec<Trace<T>>>) -> Result<Tensor<T>> {
        let mut cur = self.normalize(x);
        for layer in &self.layers {
            match layer {
                Layer::ConvRelu(conv) => {
                    let mut out = conv2d(&cur, conv);
                    relu_inplace(&mut out);
                    let input = std::mem::replace(&mut cur, out);
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(Trace::ConvRelu {
                            input,
                            output: cur.clone(),
                        });
                    }
                }
                Layer::Pool => {
                    if !cur.h.is_multiple_of(2) || !cur.w.is_multiple_of(2) {
                        return Err(Error::Validation(format!(
                            "extractor pooling needs even sides, got {}x{}",
                            cur.h, cur.w
                        )));
                    }
                    let shape = cur.shape();
                    let (out, arg) = max_pool2(&cur);
                    cur = out;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(Trace::Pool { shape, arg });
                    }
                }
            }
        }
        Ok(cur)
    }

    fn backward(&self, trace: &[Trace<T>], dfeat: Tensor<T>) -> Tensor<T> {
        let mut g = dfeat;
        for (layer, t) in self.layers.iter().zip(trace).rev() {
            match (layer, t) {
                (Layer::ConvRelu(conv), Trace::ConvRelu { input, output }) => {
                    relu_backward(output, &mut g);
                    g = conv2d_backward(input, conv, &g, None, true).expect("dx requested");
                }
                (Layer::Pool, Trace::Pool { shape, arg }) => {
                    g = max_pool2_backward(arg, &g, *shape);
                }
                _ => unreachable!("trace follows layers"),
            }
        }
        // d/dx of (x - mean) / std
        for px in g.data.chunks_exact_mut(3) {
            for (c, v) in px.iter_mut().enumerate() {
                *v = *v / T::lit(self.std[c]);
            }
        }
        g
    }
}

/// Number of leading layers to keep so that the last one ends at `relu{b}_{k}`.
fn cut_index<T>(layers: &[Layer<T>], name: &str) -> Result<usize> {
    let bad = || {
        Error::Extractor(format!(
            "layer name {name:?} is not of the form relu<block>_<conv>"
        ))
    };
    let rest = name.strip_prefix("relu").ok_or_else(bad)?;
    let (b, k) = rest.split_once('_').ok_or_else(bad)?;
    let (b, k): (usize, usize) = (b.parse().map_err(|_| bad())?, k.parse().map_err(|_| bad())?);
    let (mut block, mut conv) = (1, 0);
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            Layer::ConvRelu(_) => {
                conv += 1;
                if (block, conv) == (b, k) {
                    return Ok(i + 1);
                }
            }
            Layer::Pool => {
                block += 1;
                conv = 0;
            }
        }
    }
    Err(Error::Extractor(format!(
        "layer {name} does not exist in this network"
    )))
}

/// Frozen feature map used by the perceptual loss.
#[derive(Clone, Debug)]
pub enum PerceptualExtractor<T> {
    /// Features are the pixels themselves. For tests only.
    Identity,
    Vgg(VggFeatures<T>),
}

/// Features of one batch plus what the backward pass needs.
pub struct FeatureTape<T> {
    pub features: Tensor<T>,
    trace: Vec<Trace<T>>,
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            PerceptualExtractor::Identity => Ok(x.clone()),
            PerceptualExtractor::Vgg(v) => v.run(x, None),
        }
    }

    pub fn features_with_tape(&self, x: &Tensor<T>) -> Result<FeatureTape<T>> {
        match self {
            PerceptualExtractor::Identity => Ok(FeatureTape {
                features: x.clone(),
                trace: Vec::new(),
            }),
            PerceptualExtractor::Vgg(v) => {
                let mut trace = Vec::new();
                let features = v.run(x, Some(&mut trace))?;
                Ok(FeatureTape { features, trace })
            }
        }
    }

    /// Gradient with respect to the input given the gradient on the features.
    pub fn backward(&self, tape: &FeatureTape<T>, dfeat: Tensor<T>) -> Tensor<T> {
        match self {
            PerceptualExtractor::Identity => dfeat,
            PerceptualExtractor::Vgg(v) => v.backward(&tape.trace, dfeat),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            PerceptualExtractor::Identity => "identity".into(),
            PerceptualExtractor::Vgg(v) => format!("vgg:{}", v.layer_name),
        }
    }
}

fn read_tensor<T: Real>(view: &TensorView<'_>, name: &str) -> Result<Vec<T>> {
    let bytes = view.data();
    let values: Vec<T> = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect(),
        other => {
            return Err(Error::Extractor(format!(
                "tensor {name} has unsupported dtype {other:?}; store weights as F32"
            )))
        }
    };
    Ok(values)
}

fn parse_triplet(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Extractor(format!("bad normalization triple {s:?}")))?;
    v.try_into()
        .map_err(|_| Error::Extractor(format!("normalization needs 3 values, got {s:?}")))
}

/// Loads a VGG-style stack, checking every tensor name and shape.
pub fn load_vgg<T: Real>(path: &Path) -> Result<PerceptualExtractor<T>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Extractor(format!(
            "cannot read extractor weights {}: {e}. Export the ImageNet VGG-19 \
             `features` weights to safetensors (e.g. torchvision's vgg19 state_dict \
             saved with safetensors.torch.save_file) and pass the file path",
            path.display()
        ))
    })?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| {
        Error::Extractor(format!("{}: not a safetensors file: {e}", path.display()))
    })?;
    let meta: HashMap<String, String> = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Extractor(format!("{}: {e}", path.display())))?;

    let cfg = meta
        .get("nuigo.vgg_cfg")
        .map(String::as_str)
        .unwrap_or(VGG19_CFG);
    let layer = meta
        .get("nuigo.layer")
        .map(String::as_str)
        .unwrap_or(DEFAULT_LAYER);
    let items = parse_cfg(cfg)?;

    let mut convs = Vec::new();
    let mut cin = 3;
    let mut index = 0;
    for item in &items {
        match *item {
            CfgItem::Conv(cout) => {
                let wname = format!("features.{index}.weight");
                let bname = format!("features.{index}.bias");
                let w = st.tensor(&wname).map_err(|_| {
                    Error::Extractor(format!("{}: missing tensor {wname}", path.display()))
                })?;
                let b = st.tensor(&bname).map_err(|_| {
                    Error::Extractor(format!("{}: missing tensor {bname}", path.display()))
                })?;
                if w.shape() != [cout, cin, 3, 3] {
                    return Err(Error::Extractor(format!(
                        "tensor {wname} has shape {:?}, expected {:?}",
                        w.shape(),
                        [cout, cin, 3, 3]
                    )));
                }
                if b.shape() != [cout] {
                    return Err(Error::Extractor(format!(
                        "tensor {bname} has shape {:?}, expected [{cout}]",
                        b.shape()
                    )));
                }
                let oihw: Vec<T> = read_tensor(&w, &wname)?;
                let mut conv = Conv2d::zeros(3, cin, cout);
                // [out, in, ky, kx] -> [ky, kx, in, out]
                for o in 0..cout {
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                conv.weight.data[((ky * 3 + kx) * cin + i) * cout + o] =
                                    oihw[((o * cin + i) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                conv.bias.data = read_tensor(&b, &bname)?;
                convs.push(conv);
                cin = cout;
                index += 2;
            }
            CfgItem::Pool => index += 1,
        }
    }
    let mut vgg = VggFeatures::from_convs(cfg, layer, convs)?;
    if let Some(m) = meta.get("nuigo.mean") {
        vgg.mean = parse_triplet(m)?;
    }
    if let Some(s) = meta.get("nuigo.std") {
        vgg.std = parse_triplet(s)?;
    }
    Ok(PerceptualExtractor::Vgg(vgg))
}

/// Writes a stack in the format [`load_vgg`] reads (torchvision naming).
pub fn save_vgg_weights(path: &Path, cfg: &str, layer: &str, convs: &[Conv2d<f32>]) -> Result<()> {
    let items = parse_cfg(cfg)?;
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut index = 0;
    let mut it = convs.iter();
    for item in items {
        match item {
            CfgItem::Conv(_) => {
                let conv = it
                    .next()
                    .ok_or_else(|| Error::Extractor("too few convolutions".into()))?;
                let (cin, cout) = (conv.cin(), conv.cout());
                let mut oihw = vec![0f32; cout * cin * 9];
                for o in 0..cout {
                    for i in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                oihw[((o * cin + i) * 3 + ky) * 3 + kx] =
                                    conv.weight.data[((ky * 3 + kx) * cin + i) * cout + o];
                            }
                        }
                    }
                }
                owned.push((
                    format!("features.{index}.weight"),
                    vec![cout, cin, 3, 3],
                    oihw.iter().flat_map(|v| v.to_le_bytes()).collect(),
                ));
                owned.push((
                    format!("features.{index}.bias"),
                    vec![cout],
                    conv.bias
                        .data
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                ));
                index += 2;
            }
            CfgItem::Pool => index += 1,
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, d)| {
            TensorView::new(Dtype::F32, s.clone(), d)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Extractor(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("nuigo.vgg_cfg".to_string(), cfg.to_string());
    meta.insert("nuigo.layer".to_string(), layer.to_string());
    safetensors::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::Extractor(format!("{}: {e}", path.display())))
}
