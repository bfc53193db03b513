//! CRC-16/DNP: polynomial 0x3D65, reflected in and out, complemented output.

/// 0x3D65 bit-reversed.
const POLY_REFLECTED: u16 = 0xA6BC;

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u16;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ POLY_REFLECTED } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Computes the DNP3 link-layer CRC of `data`.
pub fn crc16_dnp(data: &[u8]) -> u16 {
    let crc = data.iter().fold(0u16, |crc, &b| (crc >> 8) ^ TABLE[((crc ^ b as u16) & 0xFF) as usize]);
    !crc
}

/// Checks `data` against a CRC stored little-endian in `crc_octets`.
pub fn crc_matches(data: &[u8], crc_octets: [u8; 2]) -> bool {
    crc16_dnp(data) == u16::from_le_bytes(crc_octets)
}
