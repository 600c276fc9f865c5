//! Block-storage integrity analogs.
//!
//! [`VerityImage`] puts a salted Merkle hash tree over a read-only image;
//! the 32-byte root is the layer identifier the execution policy enumerates,
//! and every read re-derives the path from the data block up to a trusted
//! root. [`ScratchDevice`] is the writable counterpart: per-sector AEAD with
//! the sector index bound into nonce and associated data, under an ephemeral
//! per-device key.
//!
//! The on-disk tree format is this crate's own (leaf level first, 4096-byte
//! hash blocks of 32-byte digests, salt-prefixed hashing); it is not
//! interchange-compatible with kernel device-mapper tooling.

use std::io::{self, Read, Write};

use chacha20poly1305::aead::{Aead, Payload};
use chacha20poly1305::{ChaCha20Poly1305, KeyInit, Nonce};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Data and hash block size in bytes.
pub const BLOCK_SIZE: usize = 4096;
/// 32-byte digests per 4096-byte hash block.
pub const DIGESTS_PER_HASH_BLOCK: usize = BLOCK_SIZE / 32;
/// Scratch sector payload size in bytes.
pub const SECTOR_SIZE: usize = 4096;
/// AEAD tag length appended to each stored sector.
pub const SECTOR_TAG_LEN: usize = 16;

const SIDECAR_MAGIC: &[u8; 8] = b"PRMVRT01";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("image data must be non-empty")]
    EmptyData,
    #[error("block index {index} out of range ({count} blocks)")]
    OutOfRange { index: usize, count: usize },
    #[error("integrity violation at block {block}")]
    IntegrityViolation { block: usize },
    #[error("sector count must be non-zero")]
    ZeroSectors,
    #[error("sector payload must be exactly {SECTOR_SIZE} bytes, got {0}")]
    SectorSize(usize),
    #[error("bad sidecar: {0}")]
    BadSidecar(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn leaf_digest(salt: &[u8; 32], block: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt);
    h.update(block);
    h.finalize().into()
}

/// Digest of one zero-padded 4096-byte hash block holding up to 128 child
/// digests.
fn hash_block_digest(salt: &[u8; 32], digests: &[[u8; 32]]) -> [u8; 32] {
    debug_assert!(digests.len() <= DIGESTS_PER_HASH_BLOCK);
    let mut block = [0u8; BLOCK_SIZE];
    for (i, d) in digests.iter().enumerate() {
        block[i * 32..(i + 1) * 32].copy_from_slice(d);
    }
    let mut h = Sha256::new();
    h.update(salt);
    h.update(block);
    h.finalize().into()
}

/// A read-only image plus its Merkle hash tree.
///
/// The tree is untrusted state: reads only succeed when the recomputed path
/// from the data block matches the caller-supplied trusted root. Tamper
/// accessors exist so the adversary harness can model a host flipping bits
/// in the backing device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerityImage {
    data: Vec<u8>,
    salt: [u8; 32],
    /// Leaf level first; the top level always fits one hash block.
    levels: Vec<Vec<[u8; 32]>>,
    root_hash: [u8; 32],
}

impl VerityImage {
    /// Build the tree over `data`, zero-padding it to a whole number of
    /// blocks. Deterministic in `(data, salt)`.
    pub fn build(data: &[u8], salt: [u8; 32]) -> Result<Self, StorageError> {
        if data.is_empty() {
            return Err(StorageError::EmptyData);
        }
        let mut padded = data.to_vec();
        let rem = padded.len() % BLOCK_SIZE;
        if rem != 0 {
            padded.resize(padded.len() + BLOCK_SIZE - rem, 0);
        }
        let leaves: Vec<[u8; 32]> = padded
            .chunks_exact(BLOCK_SIZE)
            .map(|block| leaf_digest(&salt, block))
            .collect();
        let mut levels = vec![leaves];
        while levels.last().unwrap().len() > DIGESTS_PER_HASH_BLOCK {
            let next = levels
                .last()
                .unwrap()
                .chunks(DIGESTS_PER_HASH_BLOCK)
                .map(|chunk| hash_block_digest(&salt, chunk))
                .collect();
            levels.push(next);
        }
        let root_hash = hash_block_digest(&salt, levels.last().unwrap());
        Ok(Self {
            data: padded,
            salt,
            levels,
            root_hash,
        })
    }

    pub fn root_hash(&self) -> [u8; 32] {
        self.root_hash
    }

    pub fn salt(&self) -> [u8; 32] {
        self.salt
    }

    pub fn block_count(&self) -> usize {
        self.data.len() / BLOCK_SIZE
    }

    pub fn levels(&self) -> &[Vec<[u8; 32]>] {
        &self.levels
    }

    /// Total bytes of stored tree digests, for corruption sweeps.
    pub fn tree_byte_len(&self) -> usize {
        self.levels.iter().map(|l| l.len() * 32).sum()
    }

    /// Return the block iff its recomputed hash path matches `trusted_root`.
    pub fn verified_read(
        &self,
        block: usize,
        trusted_root: &[u8; 32],
    ) -> Result<&[u8], StorageError> {
        let count = self.block_count();
        if block >= count {
            return Err(StorageError::OutOfRange {
                index: block,
                count,
            });
        }
        let violation = || StorageError::IntegrityViolation { block };
        let data_block = &self.data[block * BLOCK_SIZE..(block + 1) * BLOCK_SIZE];
        if leaf_digest(&self.salt, data_block) != self.levels[0][block] {
            return Err(violation());
        }
        let mut index = block;
        for level in 0..self.levels.len() - 1 {
            let start = (index / DIGESTS_PER_HASH_BLOCK) * DIGESTS_PER_HASH_BLOCK;
            let end = (start + DIGESTS_PER_HASH_BLOCK).min(self.levels[level].len());
            let parent = hash_block_digest(&self.salt, &self.levels[level][start..end]);
            index /= DIGESTS_PER_HASH_BLOCK;
            if parent != self.levels[level + 1][index] {
                return Err(violation());
            }
        }
        if hash_block_digest(&self.salt, self.levels.last().unwrap()) != *trusted_root {
            return Err(violation());
        }
        Ok(data_block)
    }

    /// Flip one bit of the backing data (host tampering model).
    pub fn tamper_data_bit(&mut self, byte_offset: usize, bit: u8) {
        self.data[byte_offset] ^= 1 << (bit % 8);
    }

    /// Flip one bit of a stored tree digest (host tampering model). The
    /// offset addresses the concatenation of all levels, leaf level first.
    pub fn tamper_tree_bit(&mut self, byte_offset: usize, bit: u8) {
        let mut remaining = byte_offset;
        for level in &mut self.levels {
            let len = level.len() * 32;
            if remaining < len {
                level[remaining / 32][remaining % 32] ^= 1 << (bit % 8);
                return;
            }
            remaining -= len;
        }
        panic!("tree offset {byte_offset} out of range");
    }

    /// Serialize the tree sidecar (`.vrt`): magic, geometry, salt, levels,
    /// root. Fixed-width little-endian throughout.
    pub fn write_sidecar(&self, mut w: impl Write) -> Result<(), StorageError> {
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&(BLOCK_SIZE as u32).to_le_bytes())?;
        w.write_all(&(self.block_count() as u64).to_le_bytes())?;
        w.write_all(&self.salt)?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        for level in &self.levels {
            w.write_all(&(level.len() as u64).to_le_bytes())?;
            for digest in level {
                w.write_all(digest)?;
            }
        }
        w.write_all(&self.root_hash)?;
        Ok(())
    }

    /// Reassemble an image from raw data plus its sidecar. The result is as
    /// untrusted as its inputs; only `verified_read` against a trusted root
    /// vouches for content.
    pub fn load(data: &[u8], mut sidecar: impl Read) -> Result<Self, StorageError> {
        let bad = |msg: &str| StorageError::BadSidecar(msg.to_string());
        let mut magic = [0u8; 8];
        sidecar.read_exact(&mut magic)?;
        if &magic != SIDECAR_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        sidecar.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) as usize != BLOCK_SIZE {
            return Err(bad("unsupported block size"));
        }
        sidecar.read_exact(&mut u64buf)?;
        let block_count = u64::from_le_bytes(u64buf) as usize;
        let mut salt = [0u8; 32];
        sidecar.read_exact(&mut salt)?;
        sidecar.read_exact(&mut u32buf)?;
        let level_count = u32::from_le_bytes(u32buf) as usize;
        if level_count == 0 || level_count > 8 {
            return Err(bad("implausible level count"));
        }
        let mut levels = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            sidecar.read_exact(&mut u64buf)?;
            let n = u64::from_le_bytes(u64buf) as usize;
            if n == 0 || n > block_count.max(1) {
                return Err(bad("implausible level length"));
            }
            let mut level = Vec::with_capacity(n);
            for _ in 0..n {
                let mut digest = [0u8; 32];
                sidecar.read_exact(&mut digest)?;
                level.push(digest);
            }
            levels.push(level);
        }
        let mut root_hash = [0u8; 32];
        sidecar.read_exact(&mut root_hash)?;

        if data.is_empty() {
            return Err(StorageError::EmptyData);
        }
        let mut padded = data.to_vec();
        let rem = padded.len() % BLOCK_SIZE;
        if rem != 0 {
            padded.resize(padded.len() + BLOCK_SIZE - rem, 0);
        }
        if padded.len() / BLOCK_SIZE != block_count {
            return Err(bad("data length does not match sidecar block count"));
        }
        if levels[0].len() != block_count {
            return Err(bad("leaf level does not cover the data"));
        }
        if levels.last().unwrap().len() > DIGESTS_PER_HASH_BLOCK {
            return Err(bad("top level exceeds one hash block"));
        }
        Ok(Self {
            data: padded,
            salt,
            levels,
            root_hash,
        })
    }
}

fn sector_nonce(index: u64) -> Nonce {
    let mut nonce = [0u8; 12];
    nonce[..8].copy_from_slice(&index.to_le_bytes());
    Nonce::from(nonce)
}

/// Writable scratch store: every sector is independently encrypted and
/// authenticated, with the sector index bound into nonce and AAD so moved
/// ciphertext never authenticates. Restoring an old ciphertext at the same
/// index does authenticate: per-sector tags carry no freshness.
pub struct ScratchDevice {
    sectors: Vec<Vec<u8>>,
    cipher: ChaCha20Poly1305,
}

impl ScratchDevice {
    /// Format a device with a fresh random key, returning the key exactly
    /// once; all sectors start as encrypted zeros.
    pub fn format(
        sector_count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Self, [u8; 32]), StorageError> {
        if sector_count == 0 {
            return Err(StorageError::ZeroSectors);
        }
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let cipher = ChaCha20Poly1305::new(&key.into());
        let zeros = [0u8; SECTOR_SIZE];
        let sectors = (0..sector_count as u64)
            .map(|i| {
                cipher
                    .encrypt(
                        &sector_nonce(i),
                        Payload {
                            msg: &zeros,
                            aad: &i.to_le_bytes(),
                        },
                    )
                    .expect("sector encryption cannot fail")
            })
            .collect();
        Ok((Self { sectors, cipher }, key))
    }

    pub fn sector_count(&self) -> usize {
        self.sectors.len()
    }

    pub fn write(&mut self, index: usize, plaintext: &[u8]) -> Result<(), StorageError> {
        if index >= self.sectors.len() {
            return Err(StorageError::OutOfRange {
                index,
                count: self.sectors.len(),
            });
        }
        if plaintext.len() != SECTOR_SIZE {
            return Err(StorageError::SectorSize(plaintext.len()));
        }
        let i = index as u64;
        self.sectors[index] = self
            .cipher
            .encrypt(
                &sector_nonce(i),
                Payload {
                    msg: plaintext,
                    aad: &i.to_le_bytes(),
                },
            )
            .expect("sector encryption cannot fail");
        Ok(())
    }

    pub fn read(&self, index: usize) -> Result<Vec<u8>, StorageError> {
        if index >= self.sectors.len() {
            return Err(StorageError::OutOfRange {
                index,
                count: self.sectors.len(),
            });
        }
        let i = index as u64;
        self.cipher
            .decrypt(
                &sector_nonce(i),
                Payload {
                    msg: self.sectors[index].as_slice(),
                    aad: &i.to_le_bytes(),
                },
            )
            .map_err(|_| StorageError::IntegrityViolation { block: index })
    }

    /// Stored ciphertext of a sector (host's view of the block device).
    pub fn raw_sector(&self, index: usize) -> &[u8] {
        &self.sectors[index]
    }

    /// Overwrite stored ciphertext (host tampering model).
    pub fn set_raw_sector(&mut self, index: usize, ciphertext: Vec<u8>) {
        self.sectors[index] = ciphertext;
    }

    /// Digest over all stored ciphertexts, for state snapshots.
    pub fn content_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for sector in &self.sectors {
            h.update(sector);
        }
        h.finalize().into()
    }
}

impl std::fmt::Debug for ScratchDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScratchDevice")
            .field("sectors", &self.sectors.len())
            .finish_non_exhaustive()
    }
}
