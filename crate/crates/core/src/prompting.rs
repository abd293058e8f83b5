//! Region-directed visual prompts and the averaged region embedding.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::PixelBox;
use crate::embedding::{EmbeddingVector, EncoderBackend};
use crate::error::{Error, Result};
use crate::flags::Flag;
use crate::imaging::{composite, draw_ellipse, gaussian_blur, grayscale, PixelMask};

pub const CIRCLE_COLOUR: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    RedCircle,
    ReverseBlur,
    ReverseGrayscale,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [
        PromptVariant::RedCircle,
        PromptVariant::ReverseBlur,
        PromptVariant::ReverseGrayscale,
    ];
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::RedCircle => "red_circle",
            PromptVariant::ReverseBlur => "reverse_blur",
            PromptVariant::ReverseGrayscale => "reverse_grayscale",
        })
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "red_circle" => Ok(Self::RedCircle),
            "reverse_blur" => Ok(Self::ReverseBlur),
            "reverse_grayscale" => Ok(Self::ReverseGrayscale),
            other => Err(Error::InvalidInput(format!("unknown prompt variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegionPrompt<'a> {
    pub image: &'a RgbImage,
    pub region: &'a PixelMask,
    pub variant: PromptVariant,
    /// Padding around the circled region, in pixels (one patch).
    pub padding: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: RgbImage,
    pub flags: Vec<Flag>,
}

/// Padded box around the largest connected pixel component of `region`,
/// clipped to the image. Returns whether clipping happened.
pub fn circle_box(region: &PixelMask, padding: u32) -> Result<(PixelBox, bool)> {
    let b = region
        .largest_component()
        .bounding_box()
        .ok_or(Error::EmptyRegion)?;
    let pad = padding as f64;
    let (w, h) = (region.width() as f64, region.height() as f64);
    let raw = PixelBox {
        x0: b.x0 - pad,
        y0: b.y0 - pad,
        x1: b.x1 + pad,
        y1: b.y1 + pad,
    };
    let clipped = PixelBox {
        x0: raw.x0.max(0.0),
        y0: raw.y0.max(0.0),
        x1: raw.x1.min(w),
        y1: raw.y1.min(h),
    };
    Ok((clipped, clipped != raw))
}

pub fn render(prompt: &RegionPrompt<'_>) -> Result<Rendered> {
    let img = prompt.image;
    if img.dimensions() != (prompt.region.width(), prompt.region.height()) {
        return Err(Error::InvalidInput(format!(
            "region is {}x{} but image is {}x{}",
            prompt.region.width(),
            prompt.region.height(),
            img.width(),
            img.height()
        )));
    }
    if prompt.region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut flags = Vec::new();
    let image = match prompt.variant {
        PromptVariant::RedCircle => {
            let (b, clipped) = circle_box(prompt.region, prompt.padding)?;
            if clipped {
                flags.push(Flag::PaddingClipped);
            }
            let mut out = img.clone();
            draw_ellipse(&mut out, &b, CIRCLE_COLOUR);
            out
        }
        PromptVariant::ReverseBlur => composite(img, &gaussian_blur(img), prompt.region)?,
        PromptVariant::ReverseGrayscale => composite(img, &grayscale(img), prompt.region)?,
    };
    Ok(Rendered { image, flags })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbedding {
    pub embedding: EmbeddingVector,
    /// Per-variant joint embeddings, in [`PromptVariant::ALL`] order.
    pub variants: Vec<EmbeddingVector>,
    pub flags: Vec<Flag>,
}

/// Unit-norm mean of the three prompt variants' joint embeddings.
pub fn region_embedding<B: EncoderBackend + ?Sized>(
    image: &RgbImage,
    region: &PixelMask,
    padding: u32,
    backend: &B,
) -> Result<RegionEmbedding> {
    let mut flags = Vec::new();
    let mut variants = Vec::with_capacity(3);
    for variant in PromptVariant::ALL {
        let r = render(&RegionPrompt {
            image,
            region,
            variant,
            padding,
        })?;
        for f in r.flags {
            if !flags.contains(&f) {
                flags.push(f);
            }
        }
        variants.push(backend.embed_image(&r.image)?);
    }
    Ok(RegionEmbedding {
        embedding: EmbeddingVector::mean_normalized(variants.iter())?,
        variants,
        flags,
    })
}
