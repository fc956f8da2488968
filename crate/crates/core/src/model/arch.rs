use super::{LayerSpec, NormKind};
use crate::error::{Error, Result};
use crate::ilm::{count_ilm_params, IlmOptions};
use crate::tensor::conv_output_size;

/// One normalization layer of an architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NormSite {
    pub name: String,
    pub channels: usize,
}

/// Parameter layout of an architecture, for counting without allocating
/// any weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchTable {
    pub name: String,
    /// Convolution and fully connected parameters (weights and biases).
    pub weight_params: usize,
    pub sites: Vec<NormSite>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamCount {
    /// All parameters, including the meta-normalization extras.
    pub total: usize,
    /// Parameters added by meta normalization.
    pub norm_extra: usize,
    /// `norm_extra` relative to the model without meta normalization.
    pub ratio: f64,
}

impl ParamCount {
    pub fn base(&self) -> usize {
        self.total - self.norm_extra
    }
}

pub const RESNET_NAMES: [&str; 5] = ["resnet18", "resnet34", "resnet50", "resnet101", "resnet152"];

impl ArchTable {
    pub fn named(name: &str) -> Result<Self> {
        let blocks: (&[usize], bool) = match name {
            "resnet18" => (&[2, 2, 2, 2], false),
            "resnet34" => (&[3, 4, 6, 3], false),
            "resnet50" => (&[3, 4, 6, 3], true),
            "resnet101" => (&[3, 4, 23, 3], true),
            "resnet152" => (&[3, 8, 36, 3], true),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown architecture `{other}`; known: {}",
                    RESNET_NAMES.join(", ")
                )))
            }
        };
        Ok(resnet(name, blocks.0, blocks.1))
    }

    /// Table for a layer plan applied to `input` (`[C, H, W]`), using the
    /// same shape rules as [`Model::build`](super::Model::build).
    pub fn from_specs(name: &str, specs: &[LayerSpec], input: [usize; 3], norm: NormKind) -> Result<Self> {
        let mut table = ArchTable {
            name: name.to_string(),
            weight_params: 0,
            sites: Vec::new(),
        };
        let mut shape = input.to_vec();
        walk(&mut table, specs, &mut shape, norm, "")?;
        Ok(table)
    }

    pub fn norm_params(&self) -> usize {
        self.sites.iter().map(|s| 2 * s.channels).sum()
    }

    /// Parameter totals when every site uses `norm`.
    pub fn count(&self, norm: NormKind, ilm: &IlmOptions) -> Result<ParamCount> {
        let base = self.weight_params + self.norm_params();
        let mut extra = 0;
        if norm.ilm {
            for site in &self.sites {
                let k = ilm.group_size_for(site.channels)?;
                extra += count_ilm_params(site.channels, k, ilm.embed_dim)?.0;
            }
        }
        Ok(ParamCount {
            total: base + extra,
            norm_extra: extra,
            ratio: extra as f64 / base as f64,
        })
    }
}

fn walk(
    table: &mut ArchTable,
    specs: &[LayerSpec],
    shape: &mut Vec<usize>,
    norm: NormKind,
    prefix: &str,
) -> Result<()> {
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("{prefix}{i}");
        match *spec {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                out_channels,
            } => {
                let [c, h, w] = chw(shape)?;
                let ho = conv_output_size(h, kernel, stride, padding)?;
                let wo = conv_output_size(w, kernel, stride, padding)?;
                table.weight_params += out_channels * c * kernel * kernel;
                *shape = vec![out_channels, ho, wo];
            }
            LayerSpec::FullyConnected { out_dim } => {
                let inputs: usize = shape.iter().product();
                table.weight_params += inputs * out_dim + out_dim;
                *shape = vec![out_dim];
            }
            LayerSpec::Relu => {}
            LayerSpec::AvgPool { kernel } | LayerSpec::MaxPool { kernel } => {
                let [c, h, w] = chw(shape)?;
                if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    return Err(Error::Shape(format!("pool {kernel} does not tile {h}×{w}")));
                }
                *shape = vec![c, h / kernel, w / kernel];
            }
            LayerSpec::GlobalAvgPool => {
                let [c, h, w] = chw(shape)?;
                if h != w {
                    return Err(Error::Shape(format!("global pooling needs a square map, got {h}×{w}")));
                }
                *shape = vec![c, 1, 1];
            }
            LayerSpec::Norm => {
                let [c, _, _] = chw(shape)?;
                norm.scheme.fit_channels(c)?;
                table.sites.push(NormSite {
                    name: format!("{name}.norm"),
                    channels: c,
                });
            }
            LayerSpec::ResidualBlock { out_channels, stride } => {
                let [c, _, _] = chw(shape)?;
                let mut body = shape.clone();
                walk(
                    table,
                    &LayerSpec::residual_body(out_channels, stride),
                    &mut body,
                    norm,
                    &format!("{name}.body."),
                )?;
                let mut skip = shape.clone();
                walk(
                    table,
                    &LayerSpec::residual_shortcut(c, out_channels, stride),
                    &mut skip,
                    norm,
                    &format!("{name}.shortcut."),
                )?;
                if body != skip {
                    return Err(Error::Shape(format!(
                        "residual branches disagree: {body:?} vs {skip:?}"
                    )));
                }
                *shape = body;
            }
        }
    }
    Ok(())
}

fn chw(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Shape(format!("layer needs a feature map, got {shape:?}"))),
    }
}

/// Standard ImageNet residual networks: 7×7 stem, four stages of basic or
/// bottleneck blocks with a projection shortcut (1×1 conv + norm) on the
/// first block of a stage whenever the shape changes, 1000-way classifier.
fn resnet(name: &str, blocks: &[usize], bottleneck: bool) -> ArchTable {
    let mut weight_params = 3 * 64 * 7 * 7;
    let mut sites = vec![NormSite {
        name: "bn1".into(),
        channels: 64,
    }];
    let expansion = if bottleneck { 4 } else { 1 };
    let mut in_c = 64;
    for (stage, (&count, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        for b in 0..count {
            let prefix = format!("layer{}.{b}", stage + 1);
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let out_c = width * expansion;
            let convs: Vec<(usize, usize, usize)> = if bottleneck {
                vec![(in_c, width, 1), (width, width, 3), (width, out_c, 1)]
            } else {
                vec![(in_c, width, 3), (width, width, 3)]
            };
            for (j, (ci, co, k)) in convs.into_iter().enumerate() {
                weight_params += ci * co * k * k;
                sites.push(NormSite {
                    name: format!("{prefix}.bn{}", j + 1),
                    channels: co,
                });
            }
            if stride != 1 || in_c != out_c {
                weight_params += in_c * out_c;
                sites.push(NormSite {
                    name: format!("{prefix}.downsample"),
                    channels: out_c,
                });
            }
            in_c = out_c;
        }
    }
    weight_params += in_c * 1000 + 1000;
    ArchTable {
        name: name.to_string(),
        weight_params,
        sites,
    }
}
