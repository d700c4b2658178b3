use crate::autodiff::AutodiffError;

/// Number of router inputs: one feature pyramid per modality.
pub const ROUTE_INPUTS: usize = 2;
/// Number of router outputs: auxiliary head 1, auxiliary head 2, fusion.
pub const ROUTE_OUTPUTS: usize = 3;

/// Gradient coefficient from router output `output` back to input `input`.
///
/// 1 when the indices coincide, 0 otherwise. Output 2 (fusion) therefore
/// never passes gradient to either input.
pub fn stop_and_route(input: usize, output: usize) -> Result<u8, AutodiffError> {
    if input >= ROUTE_INPUTS || output >= ROUTE_OUTPUTS {
        return Err(AutodiffError::RouteIndex { input, output });
    }
    Ok(u8::from(input == output))
}
