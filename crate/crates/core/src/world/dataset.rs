//! `MUSEDS1` scene files: magic, format version, canvas size and scene count,
//! then per scene the split tag, prompt token ids, subject records
//! (class, identity, box as four f32) and the canvas as three f32 planes.
//! All integers and floats are little-endian.

use std::path::Path;

use super::image::Image;
use super::scene::{Scene, Split, SubjectSpec};
use super::shapes::{ClassId, IdentityPattern};
use crate::error::{Error, Result};
use crate::grounding::BoundingBox;

const MAGIC: &[u8; 7] = b"MUSEDS1";
const VERSION: u32 = 1;

pub fn dataset_to_bytes(scenes: &[Scene]) -> Vec<u8> {
    let size = scenes.first().map_or(0, |s| s.canvas.width());
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.extend((size as u32).to_le_bytes());
    out.extend((scenes.len() as u32).to_le_bytes());
    for s in scenes {
        out.push(match s.split {
            Split::Train => 0,
            Split::Eval => 1,
        });
        out.extend((s.prompt_tokens.len() as u32).to_le_bytes());
        for t in &s.prompt_tokens {
            out.extend(t.to_le_bytes());
        }
        out.extend((s.subjects.len() as u32).to_le_bytes());
        for sub in &s.subjects {
            out.extend((sub.class.0 as u32).to_le_bytes());
            out.extend((sub.identity.index() as u32).to_le_bytes());
            for c in sub.bbox.coords() {
                out.extend((c as f32).to_le_bytes());
            }
        }
        let (w, h) = (s.canvas.width(), s.canvas.height());
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.extend((s.canvas.pixel(x, y)[c] as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::format("dataset truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn dataset_from_bytes(buf: &[u8]) -> Result<Vec<Scene>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format("not a MUSEDS1 dataset (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let size = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Eval,
            t => return Err(Error::format(format!("bad split tag {t}"))),
        };
        let n_tok = r.u32()? as usize;
        let prompt_tokens = (0..n_tok).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n_sub = r.u32()? as usize;
        let mut subjects = Vec::with_capacity(n_sub.min(64));
        for _ in 0..n_sub {
            let class = ClassId::from_index(r.u32()? as usize)?;
            let identity = IdentityPattern::from_index(r.u32()? as usize)?;
            let c: Vec<f64> = (0..4).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            subjects.push(SubjectSpec { class, identity, bbox: BoundingBox::new(c[0], c[1], c[2], c[3])? });
        }
        let plane = size * size;
        let raw: Vec<f64> = (0..3 * plane).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
        let mut data = vec![0.0; 3 * plane];
        for c in 0..3 {
            for p in 0..plane {
                data[p * 3 + c] = raw[c * plane + p];
            }
        }
        scenes.push(Scene { canvas: Image::from_data(size, size, data)?, prompt_tokens, subjects, split });
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailing bytes after dataset"));
    }
    Ok(scenes)
}

pub fn write_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    if let Some(first) = scenes.first() {
        let size = first.canvas.width();
        if scenes.iter().any(|s| s.canvas.width() != size || s.canvas.height() != size) {
            return Err(Error::invalid("all canvases in a dataset must share one square size"));
        }
    }
    std::fs::write(path, dataset_to_bytes(scenes))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    dataset_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{generate_scene, LayoutMode};

    #[test]
    fn round_trip_100_scenes() {
        let scenes: Vec<Scene> = (0..100)
            .map(|i| {
                let mode = if i % 2 == 0 { LayoutMode::Prior } else { LayoutMode::Uniform };
                generate_scene(i, 2 + (i as usize % 5), mode, Split::Train).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.bin");
        write_dataset(&scenes, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, scenes);
        for (a, b) in back.iter().zip(&scenes) {
            assert!(a.canvas.data().iter().zip(b.canvas.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_dataset_and_corruption() {
        let bytes = dataset_to_bytes(&[]);
        assert!(dataset_from_bytes(&bytes).unwrap().is_empty());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(dataset_from_bytes(&bad).is_err());

        let s = vec![generate_scene(1, 3, LayoutMode::Uniform, Split::Eval).unwrap()];
        let full = dataset_to_bytes(&s);
        assert!(dataset_from_bytes(&full[..full.len() - 3]).is_err());
        let mut v2 = full.clone();
        v2[7] = 2;
        assert!(dataset_from_bytes(&v2).is_err());
    }
}
