//! Binary sequence containers: pose sequences (`GPSQ`) and fixed-length
//! embedding sequences (`GFEM`).
//!
//! Both share the layout: magic, version `u32`, frame count `u64`, width
//! `u32`, then per frame the payload as little-endian f32. A pose frame is
//! global rotation (unit quaternion, w x y z), global translation, then the
//! P joint parameters.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};

use crate::skeleton::Pose;
use crate::Error;

pub const POSE_MAGIC: &[u8; 4] = b"GPSQ";
pub const EMBED_MAGIC: &[u8; 4] = b"GFEM";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_pose_sequence(path: &Path, poses: &[Pose]) -> Result<(), Error> {
    let p = poses.first().map(|p| p.theta.len()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(POSE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(poses.len() as u64).to_le_bytes())?;
    w.write_all(&(p as u32).to_le_bytes())?;
    for pose in poses {
        if pose.theta.len() != p {
            return Err(Error::Invalid("inconsistent parameter count across frames".into()));
        }
        let q = pose.global.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        let t = pose.global.translation.vector;
        for v in [t.x, t.y, t.z] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &pose.theta {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_pose_sequence(path: &Path) -> Result<Vec<Pose>, Error> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POSE_MAGIC {
        return Err(Error::Invalid(format!("bad pose-sequence magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("unsupported pose-sequence version {}", version)));
    }
    let frames = read_u64(&mut r)? as usize;
    let p = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let q = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
        let t = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
        let mut theta = Vec::with_capacity(p);
        for _ in 0..p {
            theta.push(read_f32(&mut r)?);
        }
        out.push(Pose {
            theta,
            global: Isometry3::from_parts(
                Translation3::new(t[0], t[1], t[2]),
                UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])),
            ),
        });
    }
    Ok(out)
}

pub fn save_embedding_sequence(path: &Path, frames: &[Vec<f64>]) -> Result<(), Error> {
    let d = frames.first().map(|f| f.len()).unwrap_or(0);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for f in frames {
        if f.len() != d {
            return Err(Error::Invalid("inconsistent embedding width across frames".into()));
        }
        for &v in f {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_embedding_sequence(path: &Path) -> Result<Vec<Vec<f64>>, Error> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(Error::Invalid(format!("bad embedding-sequence magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("unsupported embedding-sequence version {}", version)));
    }
    let frames = read_u64(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut f = Vec::with_capacity(d);
        for _ in 0..d {
            f.push(read_f32(&mut r)?);
        }
        out.push(f);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f64, Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}
