//! Classifier architecture descriptors and the flat parameter layout.
//!
//! Every parameterized layer stores one row per output unit: the unit's
//! fan-in weights (row-major, channel-major for convolutions) followed by
//! its bias. Rows of a layer are contiguous and layers are concatenated in
//! order, so a unit permutation moves whole rows.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv { c_in: usize, c_out: usize, k: usize },
    MaxPool { k: usize, stride: usize },
    Relu,
    Flatten,
    Linear { d_in: usize, d_out: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    /// Input as `[channels, height, width]`.
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
}

/// Location of one parameterized layer inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayer {
    /// Index into [`ArchitectureSpec::layers`].
    pub layer: usize,
    pub offset: usize,
    /// Output units (conv channels or linear outputs).
    pub rows: usize,
    pub fan_in: usize,
    pub is_conv: bool,
    pub kernel: usize,
}

impl ParamLayer {
    pub fn row_len(&self) -> usize {
        self.fan_in + 1
    }

    pub fn len(&self) -> usize {
        self.rows * self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ArchitectureSpec {
    /// Desk-scale CNN: two conv blocks and two linear layers on 16×16×1 inputs.
    pub fn desk_default() -> Self {
        Self {
            input: [1, 16, 16],
            layers: vec![
                Layer::Conv { c_in: 1, c_out: 8, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Conv { c_in: 8, c_out: 12, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { d_in: 48, d_out: 16 },
                Layer::Relu,
                Layer::Linear { d_in: 16, d_out: 3 },
            ],
        }
    }

    /// Three conv blocks and two linear layers on 32×32×3 inputs, 10 classes.
    pub fn paper_cnn() -> Self {
        Self {
            input: [3, 32, 32],
            layers: vec![
                Layer::Conv { c_in: 3, c_out: 16, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Conv { c_in: 16, c_out: 32, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Conv { c_in: 32, c_out: 15, k: 3 },
                Layer::MaxPool { k: 2, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { d_in: 60, d_out: 20 },
                Layer::Relu,
                Layer::Linear { d_in: 20, d_out: 10 },
            ],
        }
    }

    /// A multilayer perceptron on flattened inputs; `dims[0]` is the input width.
    pub fn mlp(input: [usize; 3], hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![Layer::Flatten];
        let mut d = input.iter().product();
        for &h in hidden {
            layers.push(Layer::Linear { d_in: d, d_out: h });
            layers.push(Layer::Relu);
            d = h;
        }
        layers.push(Layer::Linear { d_in: d, d_out: classes });
        Self { input, layers }
    }

    /// Checks that consecutive layers compose and returns the output width.
    pub fn validate(&self) -> Result<usize> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return config(format!("input shape {:?} has a zero dimension", self.input));
        }
        let mut shape = Shape::Map { c, h, w };
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (Layer::Conv { c_in, c_out, k }, Shape::Map { c, h, w }) => {
                    if c_in != c || k == 0 || k > h || k > w || c_out == 0 {
                        return config(format!("layer {i}: conv {layer:?} does not fit input {c}x{h}x{w}"));
                    }
                    Shape::Map { c: c_out, h: h - k + 1, w: w - k + 1 }
                }
                (Layer::MaxPool { k, stride }, Shape::Map { c, h, w }) => {
                    if k == 0 || stride == 0 || k > h || k > w {
                        return config(format!("layer {i}: pool {layer:?} does not fit input {c}x{h}x{w}"));
                    }
                    Shape::Map { c, h: (h - k) / stride + 1, w: (w - k) / stride + 1 }
                }
                (Layer::Relu, s) => s,
                (Layer::Flatten, Shape::Map { c, h, w }) => Shape::Flat(c * h * w),
                (Layer::Flatten, s @ Shape::Flat(_)) => s,
                (Layer::Linear { d_in, d_out }, Shape::Flat(d)) => {
                    if d_in != d || d_out == 0 {
                        return config(format!("layer {i}: linear {layer:?} expects {d_in} inputs, got {d}"));
                    }
                    Shape::Flat(d_out)
                }
                (l, s) => return config(format!("layer {i}: {l:?} cannot follow shape {s:?}")),
            };
        }
        match shape {
            Shape::Flat(d) if d >= 1 => Ok(d),
            s => config(format!("architecture must end in a flat output, ends in {s:?}")),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.validate().unwrap_or(0)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn param_layers(&self) -> Vec<ParamLayer> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (rows, fan_in, is_conv, kernel) = match *layer {
                Layer::Conv { c_in, c_out, k } => (c_out, c_in * k * k, true, k),
                Layer::Linear { d_in, d_out } => (d_out, d_in, false, 1),
                _ => continue,
            };
            let pl = ParamLayer { layer: i, offset, rows, fan_in, is_conv, kernel };
            offset += pl.len();
            out.push(pl);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layers().iter().map(ParamLayer::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_cnn_has_10853_parameters() {
        let arch = ArchitectureSpec::paper_cnn();
        assert_eq!(arch.validate().unwrap(), 10);
        assert_eq!(arch.param_count(), 10_853);
    }

    #[test]
    fn desk_default_matches_closed_form_count() {
        let arch = ArchitectureSpec::desk_default();
        assert_eq!(arch.validate().unwrap(), 3);
        // conv: c_out * (c_in*k*k + 1), linear: d_out * (d_in + 1)
        let expected = 8 * (9 + 1) + 12 * (8 * 9 + 1) + 16 * (48 + 1) + 3 * (16 + 1);
        assert_eq!(arch.param_count(), expected);
        assert_eq!(expected, 1791);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let mut arch = ArchitectureSpec::desk_default();
        arch.layers[7] = Layer::Linear { d_in: 50, d_out: 16 };
        assert!(arch.validate().is_err());
        let bad = ArchitectureSpec { input: [1, 4, 4], layers: vec![Layer::Linear { d_in: 16, d_out: 2 }] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn offsets_are_contiguous() {
        let arch = ArchitectureSpec::paper_cnn();
        let mut expect = 0;
        for pl in arch.param_layers() {
            assert_eq!(pl.offset, expect);
            expect += pl.len();
        }
        assert_eq!(expect, arch.param_count());
    }
}
