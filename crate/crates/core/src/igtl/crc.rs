//! CRC-64 as used by OpenIGTLink body checksums.
//!
//! ECMA-182 polynomial, initial value 0, no reflection, no final XOR.

const POLY: u64 = 0x42F0_E1EB_A9EA_3693;

const TABLE: [u64; 256] = build_table();

const fn build_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u64) << 56;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & (1 << 63) != 0 {
                (crc << 1) ^ POLY
            } else {
                crc << 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Continues a running CRC over `bytes`.
pub fn crc64_update(mut crc: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        let idx = ((crc >> 56) as u8 ^ b) as usize;
        crc = TABLE[idx] ^ (crc << 8);
    }
    crc
}

pub fn crc64(bytes: &[u8]) -> u64 {
    crc64_update(0, bytes)
}
