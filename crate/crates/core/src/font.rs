//! Embedded 8x16 monospace bitmap font covering printable ASCII.
//!
//! Each glyph is 16 rows of 8 bits, most significant bit leftmost. Characters
//! outside `' '..='~'` render as a hollow box.

pub const GLYPH_WIDTH: u32 = 8;
pub const GLYPH_HEIGHT: u32 = 16;

const FIRST: u32 = 0x20;
const LAST: u32 = 0x7e;

const REPLACEMENT: [u8; 16] = [
    0x00, 0x00, 0x00, 0x7e, 0x42, 0x42, 0x42, 0x42, 0x42, 0x42, 0x42, 0x42, 0x7e, 0x00, 0x00, 0x00,
];

/// Bitmap rows for `ch`.
pub fn glyph(ch: char) -> &'static [u8; 16] {
    let code = ch as u32;
    if (FIRST..=LAST).contains(&code) {
        &GLYPHS[(code - FIRST) as usize]
    } else {
        &REPLACEMENT
    }
}

/// Whether the glyph for `ch` has ink at (x, y) in glyph space.
pub fn ink(ch: char, x: u32, y: u32) -> bool {
    x < GLYPH_WIDTH && y < GLYPH_HEIGHT && glyph(ch)[y as usize] & (0x80 >> x) != 0
}

#[rustfmt::skip]
static GLYPHS: [[u8; 16]; 95] = [
    // ' '
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '!'
    [0x00, 0x00, 0x00, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // '"'
    [0x00, 0x00, 0x00, 0x64, 0x64, 0x64, 0x64, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '#'
    [0x00, 0x00, 0x00, 0x00, 0x12, 0x16, 0x7f, 0x24, 0x2c, 0xfe, 0x68, 0x48, 0x00, 0x00, 0x00, 0x00],
    // '$'
    [0x00, 0x00, 0x10, 0x10, 0x3c, 0x78, 0x70, 0x3c, 0x1e, 0x16, 0x7e, 0x3c, 0x10, 0x10, 0x00, 0x00],
    // '%'
    [0x00, 0x00, 0x00, 0x70, 0xd0, 0xd0, 0x72, 0x18, 0x4e, 0x0b, 0x0b, 0x0e, 0x00, 0x00, 0x00, 0x00],
    // '&'
    [0x00, 0x00, 0x00, 0x38, 0x64, 0x30, 0x30, 0x7b, 0xcf, 0xce, 0x6e, 0x3f, 0x00, 0x00, 0x00, 0x00],
    // '\''
    [0x00, 0x00, 0x00, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '('
    [0x00, 0x0c, 0x18, 0x18, 0x18, 0x10, 0x30, 0x30, 0x10, 0x18, 0x18, 0x18, 0x0c, 0x00, 0x00, 0x00],
    // ')'
    [0x00, 0x30, 0x10, 0x18, 0x18, 0x18, 0x08, 0x08, 0x18, 0x18, 0x18, 0x10, 0x30, 0x00, 0x00, 0x00],
    // '*'
    [0x00, 0x00, 0x00, 0x18, 0x5a, 0x3c, 0x3c, 0x5a, 0x18, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '+'
    [0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x18, 0xfe, 0xfe, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // ','
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x18, 0x30, 0x00, 0x00],
    // '-'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3c, 0x3c, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '.'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // '/'
    [0x00, 0x00, 0x00, 0x06, 0x04, 0x0c, 0x0c, 0x08, 0x18, 0x10, 0x30, 0x20, 0x60, 0x40, 0x00, 0x00],
    // '0'
    [0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x7e, 0x7e, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // '1'
    [0x00, 0x00, 0x00, 0x78, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // '2'
    [0x00, 0x00, 0x00, 0x3c, 0x4e, 0x06, 0x0e, 0x0c, 0x18, 0x30, 0x60, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // '3'
    [0x00, 0x00, 0x00, 0x3c, 0x46, 0x06, 0x3c, 0x0e, 0x06, 0x06, 0x46, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // '4'
    [0x00, 0x00, 0x00, 0x0c, 0x1c, 0x3c, 0x6c, 0x4c, 0x7e, 0x0c, 0x0c, 0x0c, 0x00, 0x00, 0x00, 0x00],
    // '5'
    [0x00, 0x00, 0x00, 0x7c, 0x60, 0x60, 0x7c, 0x4e, 0x06, 0x06, 0x4e, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // '6'
    [0x00, 0x00, 0x00, 0x3c, 0x60, 0x60, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // '7'
    [0x00, 0x00, 0x00, 0x7e, 0x06, 0x0c, 0x0c, 0x1c, 0x18, 0x18, 0x30, 0x30, 0x00, 0x00, 0x00, 0x00],
    // '8'
    [0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x3c, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // '9'
    [0x00, 0x00, 0x00, 0x3c, 0x6e, 0x66, 0x66, 0x6e, 0x3e, 0x06, 0x4c, 0x38, 0x00, 0x00, 0x00, 0x00],
    // ':'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // ';'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x18, 0x18, 0x18, 0x30, 0x00, 0x00],
    // '<'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x02, 0x1e, 0x78, 0xe0, 0x78, 0x1e, 0x02, 0x00, 0x00, 0x00, 0x00],
    // '='
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xfe, 0xfe, 0x00, 0xfe, 0xfe, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '>'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x40, 0x70, 0x1e, 0x06, 0x1e, 0x70, 0x40, 0x00, 0x00, 0x00, 0x00],
    // '?'
    [0x00, 0x00, 0x00, 0x3c, 0x46, 0x06, 0x0c, 0x18, 0x18, 0x00, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // '@'
    [0x00, 0x00, 0x00, 0x3c, 0x62, 0x5e, 0xd2, 0xb2, 0xb2, 0xb2, 0xd2, 0x5e, 0x62, 0x1e, 0x00, 0x00],
    // 'A'
    [0x00, 0x00, 0x00, 0x18, 0x3c, 0x3c, 0x2c, 0x64, 0x7e, 0x66, 0x46, 0xc3, 0x00, 0x00, 0x00, 0x00],
    // 'B'
    [0x00, 0x00, 0x00, 0x7c, 0x66, 0x66, 0x66, 0x7c, 0x66, 0x66, 0x66, 0x7c, 0x00, 0x00, 0x00, 0x00],
    // 'C'
    [0x00, 0x00, 0x00, 0x1c, 0x32, 0x60, 0x60, 0x60, 0x60, 0x60, 0x32, 0x1c, 0x00, 0x00, 0x00, 0x00],
    // 'D'
    [0x00, 0x00, 0x00, 0x7c, 0x6e, 0x66, 0x66, 0x66, 0x66, 0x66, 0x6e, 0x7c, 0x00, 0x00, 0x00, 0x00],
    // 'E'
    [0x00, 0x00, 0x00, 0x7e, 0x60, 0x60, 0x60, 0x7e, 0x60, 0x60, 0x60, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // 'F'
    [0x00, 0x00, 0x00, 0x7e, 0x60, 0x60, 0x60, 0x7e, 0x60, 0x60, 0x60, 0x60, 0x00, 0x00, 0x00, 0x00],
    // 'G'
    [0x00, 0x00, 0x00, 0x1c, 0x72, 0x60, 0x60, 0x6e, 0x66, 0x66, 0x36, 0x3e, 0x00, 0x00, 0x00, 0x00],
    // 'H'
    [0x00, 0x00, 0x00, 0x66, 0x66, 0x66, 0x66, 0x7e, 0x66, 0x66, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'I'
    [0x00, 0x00, 0x00, 0x7e, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // 'J'
    [0x00, 0x00, 0x00, 0x3c, 0x0c, 0x0c, 0x0c, 0x0c, 0x0c, 0x0c, 0x4c, 0x7c, 0x00, 0x00, 0x00, 0x00],
    // 'K'
    [0x00, 0x00, 0x00, 0x66, 0x6c, 0x7c, 0x78, 0x78, 0x6c, 0x6c, 0x66, 0x67, 0x00, 0x00, 0x00, 0x00],
    // 'L'
    [0x00, 0x00, 0x00, 0x60, 0x60, 0x60, 0x60, 0x60, 0x60, 0x60, 0x60, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // 'M'
    [0x00, 0x00, 0x00, 0xe6, 0xe6, 0xfe, 0xfe, 0xda, 0xda, 0xc2, 0xc2, 0xc2, 0x00, 0x00, 0x00, 0x00],
    // 'N'
    [0x00, 0x00, 0x00, 0x66, 0x66, 0x76, 0x76, 0x5e, 0x4e, 0x4e, 0x4e, 0x46, 0x00, 0x00, 0x00, 0x00],
    // 'O'
    [0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 'P'
    [0x00, 0x00, 0x00, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x7c, 0x60, 0x60, 0x60, 0x00, 0x00, 0x00, 0x00],
    // 'Q'
    [0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x0e, 0x04, 0x00, 0x00],
    // 'R'
    [0x00, 0x00, 0x00, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x7c, 0x6c, 0x66, 0x67, 0x00, 0x00, 0x00, 0x00],
    // 'S'
    [0x00, 0x00, 0x00, 0x3c, 0x62, 0x60, 0x70, 0x3c, 0x0e, 0x06, 0x46, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 'T'
    [0x00, 0x00, 0x00, 0x7e, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // 'U'
    [0x00, 0x00, 0x00, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 'V'
    [0x00, 0x00, 0x00, 0xc6, 0x66, 0x66, 0x66, 0x64, 0x3c, 0x3c, 0x3c, 0x38, 0x00, 0x00, 0x00, 0x00],
    // 'W'
    [0x00, 0x00, 0x00, 0xc3, 0xc3, 0xdb, 0xda, 0x5a, 0x7e, 0x6e, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'X'
    [0x00, 0x00, 0x00, 0xe6, 0x66, 0x3c, 0x3c, 0x18, 0x3c, 0x3c, 0x66, 0xc6, 0x00, 0x00, 0x00, 0x00],
    // 'Y'
    [0x00, 0x00, 0x00, 0xc7, 0x66, 0x6e, 0x3c, 0x38, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // 'Z'
    [0x00, 0x00, 0x00, 0x7e, 0x06, 0x0e, 0x1c, 0x18, 0x38, 0x70, 0x60, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // '['
    [0x00, 0x1c, 0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1c, 0x00, 0x00, 0x00],
    // '\\'
    [0x00, 0x00, 0x00, 0x40, 0x60, 0x20, 0x30, 0x10, 0x18, 0x08, 0x0c, 0x0c, 0x04, 0x06, 0x00, 0x00],
    // ']'
    [0x00, 0x38, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x38, 0x00, 0x00, 0x00],
    // '^'
    [0x00, 0x00, 0x00, 0x18, 0x3c, 0x6c, 0x46, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // '_'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xff, 0x00],
    // '`'
    [0x00, 0x00, 0x30, 0x10, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
    // 'a'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3c, 0x46, 0x06, 0x7e, 0x66, 0x66, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // 'b'
    [0x00, 0x60, 0x60, 0x60, 0x60, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x7c, 0x00, 0x00, 0x00, 0x00],
    // 'c'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x1c, 0x32, 0x60, 0x60, 0x60, 0x32, 0x1c, 0x00, 0x00, 0x00, 0x00],
    // 'd'
    [0x00, 0x06, 0x06, 0x06, 0x06, 0x3e, 0x6e, 0x66, 0x66, 0x66, 0x6e, 0x3e, 0x00, 0x00, 0x00, 0x00],
    // 'e'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x7e, 0x60, 0x62, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 'f'
    [0x00, 0x0e, 0x18, 0x18, 0x18, 0x7e, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00, 0x00, 0x00],
    // 'g'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3e, 0x6e, 0x66, 0x66, 0x66, 0x6e, 0x3e, 0x06, 0x46, 0x3c, 0x00],
    // 'h'
    [0x00, 0x60, 0x60, 0x60, 0x60, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'i'
    [0x00, 0x18, 0x18, 0x00, 0x00, 0x78, 0x18, 0x18, 0x18, 0x18, 0x18, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // 'j'
    [0x00, 0x18, 0x18, 0x00, 0x00, 0x38, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x78, 0x00],
    // 'k'
    [0x00, 0x60, 0x60, 0x60, 0x60, 0x66, 0x6c, 0x78, 0x78, 0x6c, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'l'
    [0x00, 0x70, 0x30, 0x30, 0x30, 0x30, 0x30, 0x30, 0x30, 0x30, 0x18, 0x1e, 0x00, 0x00, 0x00, 0x00],
    // 'm'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0xfe, 0xda, 0xda, 0xda, 0xda, 0xda, 0xda, 0x00, 0x00, 0x00, 0x00],
    // 'n'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'o'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 'p'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x7c, 0x66, 0x66, 0x66, 0x66, 0x66, 0x7c, 0x60, 0x60, 0x60, 0x00],
    // 'q'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3e, 0x6e, 0x66, 0x66, 0x66, 0x6e, 0x3e, 0x06, 0x06, 0x06, 0x00],
    // 'r'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3e, 0x38, 0x30, 0x30, 0x30, 0x30, 0x30, 0x00, 0x00, 0x00, 0x00],
    // 's'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x3c, 0x64, 0x70, 0x3c, 0x0e, 0x46, 0x3c, 0x00, 0x00, 0x00, 0x00],
    // 't'
    [0x00, 0x00, 0x00, 0x30, 0x30, 0x7e, 0x30, 0x30, 0x30, 0x30, 0x18, 0x1e, 0x00, 0x00, 0x00, 0x00],
    // 'u'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x66, 0x66, 0x66, 0x66, 0x66, 0x6e, 0x3e, 0x00, 0x00, 0x00, 0x00],
    // 'v'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x66, 0x66, 0x66, 0x2c, 0x3c, 0x3c, 0x18, 0x00, 0x00, 0x00, 0x00],
    // 'w'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0xc3, 0xc3, 0xda, 0x5a, 0x7e, 0x6e, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'x'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x66, 0x3c, 0x3c, 0x18, 0x3c, 0x6c, 0x66, 0x00, 0x00, 0x00, 0x00],
    // 'y'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0xe6, 0x66, 0x66, 0x3c, 0x3c, 0x3c, 0x18, 0x18, 0x38, 0x70, 0x00],
    // 'z'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x7e, 0x0e, 0x1c, 0x18, 0x30, 0x70, 0x7e, 0x00, 0x00, 0x00, 0x00],
    // '{'
    [0x00, 0x0e, 0x18, 0x18, 0x18, 0x18, 0x18, 0x70, 0x18, 0x18, 0x18, 0x18, 0x0e, 0x00, 0x00, 0x00],
    // '|'
    [0x00, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x18, 0x00, 0x00],
    // '}'
    [0x00, 0x70, 0x18, 0x18, 0x18, 0x18, 0x18, 0x0e, 0x18, 0x18, 0x18, 0x18, 0x70, 0x00, 0x00, 0x00],
    // '~'
    [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x70, 0x0e, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_is_blank_and_letters_have_ink() {
        assert!(glyph(' ').iter().all(|&r| r == 0));
        for ch in ('a'..='z').chain('A'..='Z').chain('0'..='9') {
            assert!(glyph(ch).iter().any(|&r| r != 0), "{ch} has no ink");
        }
    }

    #[test]
    fn non_ascii_uses_replacement_box() {
        assert_eq!(glyph('é'), &REPLACEMENT);
        assert_eq!(glyph('\t'), &REPLACEMENT);
    }

    #[test]
    fn distinct_lowercase_glyphs() {
        let mut seen = std::collections::HashSet::new();
        for ch in 'a'..='z' {
            assert!(seen.insert(*glyph(ch)), "duplicate bitmap for {ch}");
        }
    }
}
