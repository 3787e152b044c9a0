//! Generator layer tables. The canonical 256x256 table has 20 layers (13
//! convolution layers and 7 ToRGB layers); scaled variants keep the same
//! block pattern with channels clamped to a cap, and recover the canonical
//! table at (256, 512).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STYLE_DIM: usize = 512;
pub const BASE_RESOLUTION: usize = 4;

/// Channel schedule shared by all scales: 16384 / resolution, clamped.
const CHANNEL_BASE: usize = 16384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    ToRgb,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub resolution: usize,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
}

impl LayerSpec {
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub layers: Vec<LayerSpec>,
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub channel_cap: usize,
}

impl GeneratorArch {
    /// All Conv layers are hypernetwork-controlled; ToRGB layers never are.
    pub fn controlled_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .map(|l| l.index)
            .collect()
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv).count()
    }

    pub fn torgb_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind == LayerKind::ToRgb).count()
    }

    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index]
    }

    pub fn max_channels(&self) -> usize {
        self.layers.iter().map(|l| l.out_channels).max().unwrap_or(0)
    }

    /// Number of W+ style rows the generator consumes: one per Conv plus one
    /// extra for the final ToRGB (intermediate ToRGBs share the row of the
    /// next block's first Conv).
    pub fn style_rows(&self) -> usize {
        self.conv_count() + 1
    }

    /// Style row consumed by a layer.
    pub fn style_row(&self, layer_index: usize) -> usize {
        let mut conv_ordinal = 0usize;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv => {
                    if layer.index == layer_index {
                        return conv_ordinal;
                    }
                    conv_ordinal += 1;
                }
                LayerKind::ToRgb => {
                    if layer.index == layer_index {
                        return conv_ordinal;
                    }
                }
            }
        }
        panic!("layer index {layer_index} out of range");
    }

    fn validate(&self) -> Result<()> {
        let mut prev_res = 0usize;
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                return Err(Error::InvalidConfig(format!("layer index {i} mislabeled")));
            }
            match l.kind {
                LayerKind::ToRgb if l.kernel_size != 1 || l.out_channels != 3 => {
                    return Err(Error::InvalidConfig("ToRGB layers must be 1x1 onto 3 channels".into()))
                }
                LayerKind::Conv if l.kernel_size != 3 => {
                    return Err(Error::InvalidConfig("Conv layers must be 3x3".into()))
                }
                _ => {}
            }
            if l.resolution < prev_res {
                return Err(Error::InvalidConfig("resolutions must be non-decreasing".into()));
            }
            prev_res = l.resolution;
        }
        Ok(())
    }
}

fn channels_at(resolution: usize, cap: usize) -> usize {
    (CHANNEL_BASE / resolution).min(cap)
}

/// The generator table for a given output resolution and channel cap.
/// `scaled_arch(256, 512)` is the canonical table.
pub fn scaled_arch(output_resolution: usize, channel_cap: usize) -> Result<GeneratorArch> {
    if !output_resolution.is_power_of_two()
        || !(8..=256).contains(&output_resolution)
    {
        return Err(Error::InvalidConfig(format!(
            "output resolution must be a power of two in [8, 256], got {output_resolution}"
        )));
    }
    if channel_cap == 0 {
        return Err(Error::InvalidConfig("channel cap must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut conv_n = 0usize;
    let mut torgb_n = 0usize;
    let mut res = BASE_RESOLUTION;
    let mut prev_ch = channels_at(BASE_RESOLUTION, channel_cap);
    loop {
        let ch = channels_at(res, channel_cap);
        let convs_in_block = if res == BASE_RESOLUTION { 1 } else { 2 };
        for c in 0..convs_in_block {
            conv_n += 1;
            layers.push(LayerSpec {
                index: layers.len(),
                name: format!("Conv{conv_n}"),
                kind: LayerKind::Conv,
                resolution: res,
                out_channels: ch,
                in_channels: if c == 0 { prev_ch } else { ch },
                kernel_size: 3,
            });
        }
        torgb_n += 1;
        layers.push(LayerSpec {
            index: layers.len(),
            name: format!("ToRGB{torgb_n}"),
            kind: LayerKind::ToRgb,
            resolution: res,
            out_channels: 3,
            in_channels: ch,
            kernel_size: 1,
        });
        prev_ch = ch;
        if res == output_resolution {
            break;
        }
        res *= 2;
    }
    let arch = GeneratorArch {
        layers,
        base_resolution: BASE_RESOLUTION,
        output_resolution,
        channel_cap,
    };
    arch.validate()?;
    Ok(arch)
}

/// The 256x256 table with 512-channel cap: 20 layers, 13 Conv + 7 ToRGB.
pub fn canonical_arch() -> GeneratorArch {
    scaled_arch(256, 512).expect("canonical arch is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_matches_published_table() {
        let arch = canonical_arch();
        assert_eq!(arch.layers.len(), 20);
        assert_eq!(arch.conv_count(), 13);
        assert_eq!(arch.torgb_count(), 7);

        // (index, name, resolution, out, in, k)
        let expect: [(usize, &str, usize, usize, usize, usize); 20] = [
            (0, "Conv1", 4, 512, 512, 3),
            (1, "ToRGB1", 4, 3, 512, 1),
            (2, "Conv2", 8, 512, 512, 3),
            (3, "Conv3", 8, 512, 512, 3),
            (4, "ToRGB2", 8, 3, 512, 1),
            (5, "Conv4", 16, 512, 512, 3),
            (6, "Conv5", 16, 512, 512, 3),
            (7, "ToRGB3", 16, 3, 512, 1),
            (8, "Conv6", 32, 512, 512, 3),
            (9, "Conv7", 32, 512, 512, 3),
            (10, "ToRGB4", 32, 3, 512, 1),
            (11, "Conv8", 64, 256, 512, 3),
            (12, "Conv9", 64, 256, 256, 3),
            (13, "ToRGB5", 64, 3, 256, 1),
            (14, "Conv10", 128, 128, 256, 3),
            (15, "Conv11", 128, 128, 128, 3),
            (16, "ToRGB6", 128, 3, 128, 1),
            (17, "Conv12", 256, 64, 128, 3),
            (18, "Conv13", 256, 64, 64, 3),
            (19, "ToRGB7", 256, 3, 64, 1),
        ];
        for (i, name, res, out, inp, k) in expect {
            let l = arch.layer(i);
            assert_eq!(l.name, name);
            assert_eq!(l.resolution, res, "{name} resolution");
            assert_eq!(l.out_channels, out, "{name} out");
            assert_eq!(l.in_channels, inp, "{name} in");
            assert_eq!(l.kernel_size, k, "{name} kernel");
        }
    }

    #[test]
    fn scaled_recovers_canonical_and_rejects_bad_resolutions() {
        assert_eq!(scaled_arch(256, 512).unwrap(), canonical_arch());
        assert!(scaled_arch(7, 64).is_err());
        assert!(scaled_arch(12, 64).is_err());
        assert!(scaled_arch(512, 64).is_err());
    }

    #[test]
    fn scaled_32_64_shape() {
        let arch = scaled_arch(32, 64).unwrap();
        // Blocks at 4, 8, 16, 32 with the canonical Conv,Conv,ToRGB pattern.
        assert_eq!(arch.conv_count(), 7);
        assert_eq!(arch.torgb_count(), 4);
        assert_eq!(arch.max_channels(), 64);
        assert!(arch.layers.iter().all(|l| l.kind == LayerKind::ToRgb || l.out_channels == 64));
        assert_eq!(arch.layers.last().unwrap().resolution, 32);
    }

    #[test]
    fn style_rows_canonical() {
        let arch = canonical_arch();
        assert_eq!(arch.style_rows(), 14);
        // Convs take consecutive rows; each ToRGB shares the row of the next
        // block's first conv, with the final ToRGB taking the last row.
        assert_eq!(arch.style_row(0), 0);
        assert_eq!(arch.style_row(1), 1);
        assert_eq!(arch.style_row(2), 1);
        assert_eq!(arch.style_row(3), 2);
        assert_eq!(arch.style_row(4), 3);
        assert_eq!(arch.style_row(5), 3);
        assert_eq!(arch.style_row(18), 12);
        assert_eq!(arch.style_row(19), 13);
    }

    #[test]
    fn controlled_layers_exclude_torgb() {
        let arch = canonical_arch();
        assert_eq!(arch.controlled_layers(), vec![0, 2, 3, 5, 6, 8, 9, 11, 12, 14, 15, 17, 18]);
    }
}
