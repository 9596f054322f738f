//! Broadcast wire format for trajectories.
//!
//! Fixed little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       1     magic (0xE5)
//! 1       1     version (1)
//! 2       2     agent id, u16
//! 4       4     epoch, u32
//! 8       1     degree, u8
//! 9       1     control point count, u8
//! 10      8     knot interval, f64 seconds
//! 18      8     start time, f64 seconds
//! 26      24*n  control points, x/y/z f64 each
//! 26+24n  4     CRC-32 (IEEE) of all preceding bytes
//! ```
//!
//! The whole record must fit in [`MAX_MESSAGE_BYTES`], which caps the
//! control point count at [`MAX_CONTROL_POINTS`].

use thiserror::Error;

use crate::trajectory::{BSplineTrajectory, TrajectoryError, Vec3};

pub const MAGIC: u8 = 0xE5;
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 26;
pub const CRC_BYTES: usize = 4;
pub const MAX_MESSAGE_BYTES: usize = 512;
pub const MAX_CONTROL_POINTS: usize = (MAX_MESSAGE_BYTES - HEADER_BYTES - CRC_BYTES) / 24;

pub type AgentId = u16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MessageError {
    #[error("trajectory has {count} control points, at most {max} fit in a message")]
    TooLong { count: usize, max: usize },
    #[error("degree {0} does not fit the wire format")]
    DegreeTooLarge(usize),
    #[error("message truncated: {got} bytes, expected {expected}")]
    Truncated { got: usize, expected: usize },
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("checksum mismatch")]
    Checksum,
    #[error("invalid trajectory: {0}")]
    Trajectory(#[from] TrajectoryError),
}

/// A trajectory as shared over the broadcast network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMessage {
    pub agent_id: AgentId,
    pub epoch: u32,
    pub trajectory: BSplineTrajectory,
}

/// Encoded size of a message carrying `count` control points.
pub const fn encoded_len(count: usize) -> usize {
    HEADER_BYTES + 24 * count + CRC_BYTES
}

/// Packages a trajectory for broadcast, rejecting ones over the size budget.
pub fn clip_to_message(
    trajectory: &BSplineTrajectory,
    agent_id: AgentId,
    epoch: u32,
) -> Result<TrajectoryMessage, MessageError> {
    let count = trajectory.control_points().len();
    if count > MAX_CONTROL_POINTS {
        return Err(MessageError::TooLong {
            count,
            max: MAX_CONTROL_POINTS,
        });
    }
    if trajectory.degree() > u8::MAX as usize {
        return Err(MessageError::DegreeTooLarge(trajectory.degree()));
    }
    Ok(TrajectoryMessage {
        agent_id,
        epoch,
        trajectory: trajectory.clone(),
    })
}

impl TrajectoryMessage {
    pub fn encode(&self) -> Result<Vec<u8>, MessageError> {
        let traj = &self.trajectory;
        let pts = traj.control_points();
        if pts.len() > MAX_CONTROL_POINTS {
            return Err(MessageError::TooLong {
                count: pts.len(),
                max: MAX_CONTROL_POINTS,
            });
        }
        let degree =
            u8::try_from(traj.degree()).map_err(|_| MessageError::DegreeTooLarge(traj.degree()))?;
        let mut buf = Vec::with_capacity(encoded_len(pts.len()));
        buf.push(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&self.agent_id.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.push(degree);
        buf.push(pts.len() as u8);
        buf.extend_from_slice(&traj.knot_interval().to_le_bytes());
        buf.extend_from_slice(&traj.start_time().to_le_bytes());
        for q in pts {
            for c in q.iter() {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MessageError> {
        if bytes.len() < HEADER_BYTES + CRC_BYTES {
            return Err(MessageError::Truncated {
                got: bytes.len(),
                expected: HEADER_BYTES + CRC_BYTES,
            });
        }
        if bytes[0] != MAGIC {
            return Err(MessageError::BadMagic(bytes[0]));
        }
        if bytes[1] != VERSION {
            return Err(MessageError::BadVersion(bytes[1]));
        }
        let count = bytes[9] as usize;
        let expected = encoded_len(count);
        if bytes.len() != expected {
            return Err(MessageError::Truncated {
                got: bytes.len(),
                expected,
            });
        }
        let body = &bytes[..expected - CRC_BYTES];
        let crc = u32::from_le_bytes(bytes[expected - CRC_BYTES..].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            return Err(MessageError::Checksum);
        }
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let agent_id = u16::from_le_bytes([bytes[2], bytes[3]]);
        let epoch = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let degree = bytes[8] as usize;
        let knot_interval = f64_at(10);
        let start_time = f64_at(18);
        let pts = (0..count)
            .map(|i| {
                let off = HEADER_BYTES + 24 * i;
                Vec3::new(f64_at(off), f64_at(off + 8), f64_at(off + 16))
            })
            .collect();
        Ok(Self {
            agent_id,
            epoch,
            trajectory: BSplineTrajectory::new(degree, pts, knot_interval, start_time)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> BSplineTrajectory {
        let pts = (0..n).map(|i| Vec3::new(i as f64, 1.0, 2.0)).collect();
        BSplineTrajectory::new(3, pts, 0.25, 3.5).unwrap()
    }

    #[test]
    fn twelve_points_fit_the_budget() {
        // 26-byte header + 12 * 3 * 8 coordinates + 4-byte CRC.
        assert_eq!(encoded_len(12), 318);
        let bytes = clip_to_message(&line(12), 7, 99).unwrap().encode().unwrap();
        assert_eq!(bytes.len(), 318);
        assert!(bytes.len() < MAX_MESSAGE_BYTES);
        assert_eq!(MAX_CONTROL_POINTS, 20);
        assert!(encoded_len(MAX_CONTROL_POINTS) <= MAX_MESSAGE_BYTES);
        assert!(encoded_len(MAX_CONTROL_POINTS + 1) > MAX_MESSAGE_BYTES);
    }

    #[test]
    fn oversized_trajectory_is_rejected() {
        assert_eq!(
            clip_to_message(&line(21), 0, 0),
            Err(MessageError::TooLong { count: 21, max: 20 })
        );
    }

    #[test]
    fn corrupted_bytes_fail_checksum() {
        let mut bytes = clip_to_message(&line(6), 1, 2).unwrap().encode().unwrap();
        bytes[30] ^= 0x01;
        assert_eq!(TrajectoryMessage::decode(&bytes), Err(MessageError::Checksum));
        bytes[0] = 0;
        assert_eq!(TrajectoryMessage::decode(&bytes), Err(MessageError::BadMagic(0)));
        assert!(matches!(
            TrajectoryMessage::decode(&bytes[..20]),
            Err(MessageError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            id in any::<u16>(),
            epoch in any::<u32>(),
            dt in 0.01f64..2.0,
            start in -1e4f64..1e4,
            coords in prop::collection::vec(-1e3f64..1e3, 12..=60),
        ) {
            let pts: Vec<Vec3> = coords.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            let traj = BSplineTrajectory::new(3, pts, dt, start).unwrap();
            let msg = clip_to_message(&traj, id, epoch).unwrap();
            let decoded = TrajectoryMessage::decode(&msg.encode().unwrap()).unwrap();
            prop_assert_eq!(decoded.agent_id, id);
            prop_assert_eq!(decoded.epoch, epoch);
            prop_assert_eq!(decoded.trajectory.knot_interval().to_bits(), dt.to_bits());
            prop_assert_eq!(decoded.trajectory.start_time().to_bits(), start.to_bits());
            for (a, b) in decoded.trajectory.control_points().iter().zip(traj.control_points()) {
                for k in 0..3 {
                    prop_assert_eq!(a[k].to_bits(), b[k].to_bits());
                }
            }
        }
    }
}
