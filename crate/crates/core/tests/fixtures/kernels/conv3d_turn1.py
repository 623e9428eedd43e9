import torch
from torch.utils.cpp_extension import load_inline
import math

class ModelNew(torch.nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, clamp_min, clamp_max):
        super(ModelNew, self).__init__()
        self.clamp_min = clamp_min
        self.clamp_max = clamp_max
        
        # Initialize convolution weights and bias
        self.weight = torch.nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size, kernel_size))
        self.bias = torch.nn.Parameter(torch.empty(out_channels))
        # Weight initialization following PyTorch's Conv3d default
        torch.nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        fan_in, _ = torch.nn.init._calculate_fan_in_and_fan_out(self.weight)
        bound = 1 / math.sqrt(fan_in)
        torch.nn.init.uniform_(self.bias, -bound, bound)

        # Define the fused convolution and activation CUDA kernel
        conv_activation_source = """
        #include <torch/extension.h>
        #include <cuda_runtime.h>
        #include <math.h>
        
        __global__ void conv_activation_kernel(const float* input, const float* weights, const float* bias, float* output, 
                                              int N, int C_in, int D, int H, int W, int C_out, int kD, int kH, int kW, 
                                              float clamp_min, float clamp_max) {
            int idx = blockIdx.x * blockDim.x + threadIdx.x;
            const int W_out = W - kW + 1;
            const int H_out = H - kH + 1;
            const int D_out = D - kD + 1;
            const int total_elements = N * C_out * D_out * H_out * W_out;
            if (idx >= total_elements) return;

            // Decompose index into output coordinates
            int w_out = idx % W_out;
            int h_out = (idx / W_out) % H_out;
            int d_out = (idx / (W_out * H_out)) % D_out;
            int f = (idx / (W_out * H_out * D_out)) % C_out;
            int n = idx / (C_out * D_out * H_out * W_out);

            float sum = 0;
            for (int c = 0; c < C_in; ++c) {
                for (int kd = 0; kd < kD; ++kd) {
                    for (int kh = 0; kh < kH; ++kh) {
                        for (int kw = 0; kw < kW; ++kw) {
                            // Input tensor index calculation
                            int d_in = d_out + kd;
                            int h_in = h_out + kh;
                            int w_in = w_out + kw;
                            int input_idx = n * C_in * D * H * W +
                                            c * D * H * W +
                                            d_in * H * W +
                                            h_in * W +
                                            w_in;
                            // Weight tensor index calculation
                            int weight_idx = f * C_in * kD * kH * kW +
                                             c * kD * kH * kW +
                                             kd * kH * kW +
                                             kh * kW +
                                             kw;
                            sum += input[input_idx] * weights[weight_idx];
                        }
                    }
                }
            }
            sum += bias[f];

            // Apply activations sequentially
            sum = tanh(sum);
            sum = fmaxf(clamp_min, fminf(sum, clamp_max));
            {
                float inner = sum + 0.044715f * sum * sum * sum;
                inner *= 0.79788456f; // sqrt(2/pi) approximation
                sum = sum * 0.5f * (1.0f + tanh(inner));
            }

            // Output tensor index calculation
            int output_idx = n * C_out * D_out * H_out * W_out +
                            f * D_out * H_out * W_out +
                            d_out * H_out * W_out +
                            h_out * W_out +
                            w_out;
            output[output_idx] = sum;
        }

        torch::Tensor conv_activation_cuda(torch::Tensor input, torch::Tensor weights, torch::Tensor bias, 
                                          float clamp_min, float clamp_max) {
            // Dimension extraction
            int N = input.size(0);
            int C_in = input.size(1);
            int D = input.size(2);
            int H = input.size(3);
            int W = input.size(4);
            int C_out = weights.size(0);
            int kD = weights.size(2);
            int kH = weights.size(3);
            int kW = weights.size(4);

            // Output dimensions
            int D_out = D - kD + 1;
            int H_out = H - kH + 1;
            int W_out = W - kW + 1;

            // Create output tensor
            auto output = torch::empty({N, C_out, D_out, H_out, W_out}, input.options());

            // Launch kernel
            int total_elements = N * C_out * D_out * H_out * W_out;
            const int block_size = 256;
            const int grid_size = (total_elements + block_size - 1) / block_size;
            conv_activation_kernel<<<grid_size, block_size>>>(
                input.data_ptr<float>(), weights.data_ptr<float>(), bias.data_ptr<float>(), 
                output.data_ptr<float>(), N, C_in, D, H, W, C_out, kD, kH, kW, 
                clamp_min, clamp_max
            );
            return output;
        }
        """

        conv_activation_header = """
        torch::Tensor conv_activation_cuda(torch::Tensor input, torch::Tensor weights, torch::Tensor bias, 
                                          float clamp_min, float clamp_max);
        """

        # Load the CUDA kernel
        self.conv_activation = load_inline(
            name="conv_activation",
            cpp_sources=conv_activation_header,
            cuda_sources=conv_activation_source,
            functions=["conv_activation_cuda"],
            verbose=True
        )

    def forward(self, x):
        return self.conv_activation.conv_activation_cuda(x, self.weight, self.bias, self.clamp_min, self.clamp_max)
