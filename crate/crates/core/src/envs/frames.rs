//! Frame stacks, patch extraction and PGM output.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use crate::attention::ObservationSet;
use crate::numerics::RealMat;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame {height}x{width} is not divisible into {patch}x{patch} patches")]
    Divisibility {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("patch set has {actual} components, expected {expected}")]
    PatchCount { expected: usize, actual: usize },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// The `k` most recent frames, oldest first; slots before the episode start are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    frames: VecDeque<RealMat>,
    height: usize,
    width: usize,
}

impl FrameStack {
    pub fn new(k: usize, height: usize, width: usize) -> Self {
        Self {
            frames: (0..k).map(|_| RealMat::zeros(height, width)).collect(),
            height,
            width,
        }
    }

    pub fn push(&mut self, frame: RealMat) {
        debug_assert_eq!(frame.shape(), (self.height, self.width));
        self.frames.pop_front();
        self.frames.push_back(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Frame `i`, 0 = oldest.
    pub fn frame(&self, i: usize) -> &RealMat {
        &self.frames[i]
    }

    pub fn latest(&self) -> &RealMat {
        self.frames.back().expect("frame stack is never empty")
    }
}

/// Splits the stack into non-overlapping `patch × patch` tiles in row-major tile order.
/// Each component is flattened `(row, col, frame)` with the frame index fastest.
pub fn patchify(stack: &FrameStack, patch: usize) -> Result<ObservationSet, FrameError> {
    let (h, w) = (stack.height(), stack.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(FrameError::Divisibility {
            height: h,
            width: w,
            patch,
        });
    }
    let k = stack.len();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = RealMat::zeros(gh * gw, patch * patch * k);
    for pr in 0..gh {
        for pc in 0..gw {
            let row = out.row_mut(pr * gw + pc);
            for r in 0..patch {
                for c in 0..patch {
                    for f in 0..k {
                        row[(r * patch + c) * k + f] =
                            stack.frame(f).get(pr * patch + r, pc * patch + c);
                    }
                }
            }
        }
    }
    Ok(ObservationSet::from_rows(out).expect("at least one patch"))
}

/// Rebuilds frame `f` of a stack from patches in their original order.
pub fn unpatchify(
    patches: &ObservationSet,
    height: usize,
    width: usize,
    patch: usize,
    frames: usize,
    f: usize,
) -> Result<RealMat, FrameError> {
    let gw = width / patch;
    let expected = (height / patch) * gw;
    if patches.len() != expected {
        return Err(FrameError::PatchCount {
            expected,
            actual: patches.len(),
        });
    }
    let mut out = RealMat::zeros(height, width);
    for i in 0..patches.len() {
        let (pr, pc) = (i / gw, i % gw);
        let comp = patches.component(i);
        for r in 0..patch {
            for c in 0..patch {
                out.set(pr * patch + r, pc * patch + c, comp[(r * patch + c) * frames + f]);
            }
        }
    }
    Ok(out)
}

/// Binary 8-bit PGM (P5) encoding; values are clamped to `[0, 1]` and scaled to 255.
pub fn pgm_bytes(frame: &RealMat) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n255\n", frame.cols(), frame.rows()).into_bytes();
    buf.extend(
        frame
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    buf
}

pub fn write_pgm(path: &Path, frame: &RealMat) -> Result<(), FrameError> {
    let io = |source| FrameError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(&pgm_bytes(frame)).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_is_oldest_first_and_zero_filled() {
        let mut s = FrameStack::new(4, 2, 2);
        s.push(RealMat::filled(2, 2, 1.0));
        assert_eq!(s.frame(0), &RealMat::zeros(2, 2));
        assert_eq!(s.latest(), &RealMat::filled(2, 2, 1.0));
        s.push(RealMat::filled(2, 2, 0.5));
        assert_eq!(s.frame(2), &RealMat::filled(2, 2, 1.0));
        assert_eq!(s.frame(3), &RealMat::filled(2, 2, 0.5));
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&FrameStack::new(4, 84, 84), 6).unwrap().len(), 196);
        assert_eq!(patchify(&FrameStack::new(4, 96, 96), 6).unwrap().len(), 256);
        assert!(matches!(
            patchify(&FrameStack::new(4, 85, 84), 6),
            Err(FrameError::Divisibility { .. })
        ));
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        write_pgm(&p, &RealMat::filled(2, 3, 1.0)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[255u8; 6]);
    }
}
