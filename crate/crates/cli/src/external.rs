//! Adapter that delegates hole filling to an external command.
//!
//! Protocol: the command is invoked as `<cmd> <image.png> <mask.png>
//! <out.png>` in a temporary directory; the mask is 8-bit gray with 255 at
//! valid pixels. A nonzero exit reports an inpainting error for that pose.
//! Valid pixels of the returned image are overwritten with the original
//! full-precision samples, so the interface contract (output equals input on
//! the mask, bit-exactly) holds regardless of what the command produced.

use std::process::Command;

use sparsesplat_core::grid::{BinaryMask, ColorImage};
use sparsesplat_core::inpaint::{InpaintError, Inpainter};

use crate::formats::{read_image, write_mask_png, write_png};

pub struct ExternalInpainter {
    pub command: String,
}

impl Inpainter for ExternalInpainter {
    fn fill(&self, image: &ColorImage, mask: &BinaryMask) -> Result<ColorImage, InpaintError> {
        if mask.count_true() == 0 {
            return Err(InpaintError::EmptyMask);
        }
        let dir = tempfile::tempdir()
            .map_err(|e| InpaintError::External(format!("temp dir: {e}")))?;
        let image_path = dir.path().join("image.png");
        let mask_path = dir.path().join("mask.png");
        let out_path = dir.path().join("out.png");
        write_png(&image_path, image).map_err(|e| InpaintError::External(e.to_string()))?;
        write_mask_png(&mask_path, mask).map_err(|e| InpaintError::External(e.to_string()))?;

        let status = Command::new(&self.command)
            .arg(&image_path)
            .arg(&mask_path)
            .arg(&out_path)
            .status()
            .map_err(|e| InpaintError::External(format!("spawn '{}': {e}", self.command)))?;
        if !status.success() {
            return Err(InpaintError::External(format!(
                "'{}' exited with {status}",
                self.command
            )));
        }

        let filled = read_image(&out_path).map_err(|e| InpaintError::External(e.to_string()))?;
        if filled.width() != image.width() || filled.height() != image.height() {
            return Err(InpaintError::External(format!(
                "command returned {}x{}, expected {}x{}",
                filled.width(),
                filled.height(),
                image.width(),
                image.height()
            )));
        }
        // Enforce the interface invariant over the 8-bit round trip.
        let mut out = filled;
        for y in 0..image.height() {
            for x in 0..image.width() {
                if mask.at(x, y) {
                    out.set(x, y, image.at(x, y));
                }
            }
        }
        Ok(out)
    }
}
